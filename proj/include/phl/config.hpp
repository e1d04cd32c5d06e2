#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "phl/augment.hpp"
#include "phl/data.hpp"
#include "phl/evaluation.hpp"
#include "phl/models.hpp"
#include "phl/training.hpp"

namespace phl {

std::string to_string(DataKind kind);
DataKind parse_data_kind(const std::string& text);

struct RunSection {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
};

struct DataSection {
  DataKind kind = DataKind::Synthetic;
  std::vector<std::string> paths;       // CIFAR-10 training batches
  std::vector<std::string> test_paths;  // CIFAR-10 test batch; empty: split the training set
  double test_fraction = 0.2;
  Index limit = 0;  // cifar10: keep the first `limit` source examples; 0 keeps all
  std::uint64_t split_seed = 1;
};

struct ModelSection {
  std::vector<Index> encoder{32, 256, 128, 64};  // p, hidden..., m
  HeadKind head = HeadKind::Linear;
  Index d = 16;
  Index hidden = 0;  // NonLinear only; 0 means unset
  bool batchnorm = true;
  std::string head_checkpoint;  // FixedPretrained: checkpoint directory to take g from

  Index m() const { return encoder.back(); }
};

struct EvalSection {
  EvalConfig config;
  Index every = 0;  // evaluate every n epochs as well as after the last; 0: last only
};

struct OutputSection {
  std::vector<Index> feature_epochs;  // dump H (and Z) after these epochs; 0 is the initial model
  Index checkpoint_every = 0;         // 0: initial and final checkpoints only
};

/// Everything a run needs. The text form is flat `section.key = value`
/// lines; `#` starts a comment; unknown or repeated keys are errors.
struct ExperimentConfig {
  RunSection run;
  DataSection data;
  SynthConfig synth;
  AugConfig aug;
  ModelSection model;
  TrainSchedule train;
  EvalSection eval;
  OutputSection output;

  /// Cross-field checks; messages name the offending key.
  void validate() const;

  /// Every key in registry order, one `key = value` line each. Parsing the
  /// result reproduces the config exactly (doubles use shortest round-trip).
  std::string canonical() const;
  /// Ordered (key, value) pairs of canonical().
  std::vector<std::pair<std::string, std::string>> entries() const;
  /// FNV-1a over canonical() without run.output_dir, as 16 hex digits.
  std::string hash() const;

  /// Sets one key from its text value; ConfigError names the key on failure.
  void set(const std::string& key, const std::string& value);
};

/// Parses config text over the defaults. `origin` prefixes line numbers in
/// error messages.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config");
ExperimentConfig load_config(const std::filesystem::path& path);
/// All registered keys in order.
std::vector<std::string> config_keys();

/// Shortest decimal text that parses back to the same double.
std::string format_double(double value);

}  // namespace phl
