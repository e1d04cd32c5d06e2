#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "phl/config.hpp"
#include "phl/diagnostics.hpp"

namespace phl {

inline constexpr const char* kVersion = "0.1.0";

/// Train and test splits described by the config. `data.limit` truncates
/// the source before splitting.
DataSplit load_experiment_data(const ExperimentConfig& config);

/// A dataset from files: one `<stem>.pht` (labels from `<stem>.labels`) or
/// one or more CIFAR-10 `.bin` batches.
LabeledDataset load_dataset_files(const std::vector<std::filesystem::path>& paths);

TrainSchedule schedule_for(const ExperimentConfig& config);
Encoder initial_encoder(const ExperimentConfig& config);
/// Fresh head for the config; FixedPretrained copies A and b from the
/// linear head stored in `model.head_checkpoint` and freezes them.
Head initial_head(const ExperimentConfig& config);

struct TrainOptions {
  bool force = false;           // replace an existing run directory holding a manifest
  std::ostream* log = nullptr;  // one progress line per epoch
};

struct TrainOutcome {
  std::filesystem::path run_dir;
  RunMetrics metrics;
  std::vector<EvalReport> final_eval;
  std::vector<std::string> notices;
  Encoder encoder;
  Head head;
};

/// Run directory layout under `run.output_dir`:
///   manifest.json          config hash and echo, version, timestamps, status, artifacts
///   metrics.jsonl          one object per epoch, then evaluation records
///   checkpoints/initial    model before the first step
///   checkpoints/epoch_NNNN every `output.checkpoint_every` epochs
///   checkpoints/final      model after the last epoch
///   features/epoch_NNNN.{h,z}.pht and features/train.labels
///   eval.csv               final evaluation (regime, feature, method, accuracy)
/// epochs = 0 writes the manifest and the initial checkpoint only.
TrainOutcome cmd_train(const ExperimentConfig& config, const TrainOptions& options = {});

struct DiagnosticsReport {
  SpectrumReport h;
  SpectrumReport z;
  Index rank_h = 0;
  Index rank_z = 0;
  Index rank_deficit = 0;
  std::optional<Index> rank_ha;  // rank(H A^T) for linear-family heads
  std::vector<std::filesystem::path> files;
};

/// Spectra and ranks of H and Z over `data`, written to
/// `<out_dir>/diagnostics.json`; linear-family heads also get h_r.pht and
/// h_n.pht. Throws NumericalError if rank(H A^T) > rank(H).
DiagnosticsReport cmd_diagnose(const std::filesystem::path& checkpoint, const LabeledDataset& data,
                               const std::filesystem::path& out_dir);

/// component_eval on the checkpoint, written as CSV with columns
/// regime, feature, method, accuracy. Requesting h_r or h_n from a head
/// without a linear map on h is a ConfigError.
std::vector<EvalReport> cmd_eval(const std::filesystem::path& checkpoint, const LabeledDataset& train,
                                 const LabeledDataset& test, const EvalConfig& config,
                                 const std::filesystem::path& csv_path,
                                 const std::string& regime_label = "");

/// Writes `<stem>.pht` with the chosen component (x, h, z, h_r, h_n) of
/// every row of `data` and `<stem>.labels`.
void cmd_export_features(const std::filesystem::path& checkpoint, const LabeledDataset& data,
                         const std::string& component, const std::filesystem::path& stem);

// ---- sweeps -----------------------------------------------------------------

/// Named regime/head presets: nohead, joint, bilevel, joint-nonlinear,
/// bilevel-nonlinear, fixed-random, fixed-pretrained, directclr, pca-top,
/// pca-bottom, slow-single, slow-optimal.
std::vector<std::string> sweep_variants();

struct SweepSpec {
  ExperimentConfig base;
  std::vector<std::string> variants{"joint", "bilevel"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::filesystem::path output_dir = "runs/sweep";
  Index nonlinear_hidden = 48;
};

/// Sweep files use the config format; `sweep.variants`, `sweep.seeds`,
/// `sweep.output_dir` and `sweep.nonlinear_hidden` configure the matrix and
/// every other key sets the base config.
SweepSpec parse_sweep(const std::string& text, const std::string& origin = "sweep");
SweepSpec load_sweep(const std::filesystem::path& path);

/// The base config specialised to one variant and seed. fixed-pretrained
/// takes its head from the joint run of the same seed.
ExperimentConfig variant_config(const SweepSpec& spec, const std::string& variant,
                                std::uint64_t seed);
std::filesystem::path variant_run_dir(const SweepSpec& spec, const std::string& variant,
                                      std::uint64_t seed);

struct SweepRow {
  std::string variant;
  std::string regime;
  std::string head;
  std::string feature;
  std::string method;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single run
  Index runs = 0;
};

struct SweepOutcome {
  std::vector<SweepRow> rows;
  std::vector<std::string> failed;  // "variant/seed_N: message"
  std::filesystem::path summary_csv;
};

/// Runs variants x seeds in up to `workers` child processes (fixed-pretrained
/// after the joint runs it depends on), then writes summary.csv with mean
/// and std over seeds. Failed runs are recorded and the sweep continues.
SweepOutcome cmd_sweep(const SweepSpec& spec, int workers, bool force = false,
                       std::ostream* log = nullptr);

/// Worker cap from PHL_THREADS (default 1).
int worker_limit();

}  // namespace phl
