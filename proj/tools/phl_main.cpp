// phl: train, diagnose, evaluate and sweep projection-head regimes.
//
// Exit codes: 0 success, 2 configuration / format / shape error,
// 3 numerical or other runtime error, 4 sweep finished with failed runs.

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "phl/experiment.hpp"

namespace fs = std::filesystem;
using namespace phl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitSweepFailure = 4;

// Dataset for diagnose/eval/export: explicit files win, else the config's split.
struct DataArgs {
  std::vector<std::string> files;
  std::string config;
  std::string split = "train";
};

void add_data_options(CLI::App* cmd, DataArgs& args, const std::string& what) {
  cmd->add_option("--data", args.files,
                  what + ": a <stem>.pht export (labels in <stem>.labels) or CIFAR-10 .bin files");
  cmd->add_option("--config", args.config, "regenerate the dataset described by this run config");
  cmd->add_option("--split", args.split, "which config split to use")
      ->check(CLI::IsMember({"train", "test"}));
}

LabeledDataset resolve_data(const DataArgs& args) {
  if (!args.files.empty()) {
    return load_dataset_files(std::vector<fs::path>(args.files.begin(), args.files.end()));
  }
  if (args.config.empty()) throw ConfigError("give --data files or --config");
  const ExperimentConfig config = load_config(args.config);
  const DataSplit split = load_experiment_data(config);
  return args.split == "train" ? split.train : split.test;
}

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  for (char c : text + ",") {
    if (c == ',') {
      if (!item.empty()) out.push_back(item);
      item.clear();
    } else if (c != ' ') {
      item += c;
    }
  }
  return out;
}

void print_sweep(const SweepOutcome& outcome) {
  std::cout << std::left << std::setw(20) << "variant" << std::setw(6) << "feat" << std::setw(8)
            << "method" << "accuracy (mean +- std over seeds)\n";
  for (const auto& r : outcome.rows) {
    std::cout << std::left << std::setw(20) << r.variant << std::setw(6) << r.feature
              << std::setw(8) << r.method << std::fixed << std::setprecision(2) << 100.0 * r.mean
              << " +- " << 100.0 * r.std << "  (n=" << r.runs << ")\n";
  }
  std::cout.unsetf(std::ios::fixed);
  for (const auto& f : outcome.failed) std::cout << "failed: " << f << '\n';
  std::cout << "summary: " << outcome.summary_csv.string() << '\n';
}

int run(int argc, char** argv) {
  CLI::App app{"Projection-head regimes for contrastive learning at desk scale"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  // train
  std::string train_config;
  bool force = false;
  bool quiet = false;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "train one configuration into its run directory");
  train->add_option("config", train_config, "config file")->required()->check(CLI::ExistingFile);
  train->add_flag("--force", force, "replace an existing run directory");
  train->add_flag("--quiet", quiet, "no per-epoch progress on stderr");
  train->add_option("--set", overrides, "override a config key: key=value (repeatable)");

  // diagnose
  std::string diag_checkpoint, diag_out;
  DataArgs diag_data;
  auto* diagnose = app.add_subcommand("diagnose", "spectra, ranks and null-space dumps for a checkpoint");
  diagnose->add_option("--checkpoint", diag_checkpoint, "checkpoint directory")->required();
  diagnose->add_option("--out", diag_out, "output directory")->required();
  add_data_options(diagnose, diag_data, "features are computed on this dataset");

  // eval
  std::string eval_checkpoint, eval_csv, eval_components = "h,z,h_r,h_n", eval_methods = "knn,linear",
                                          eval_regime;
  std::vector<std::string> eval_train_files, eval_test_files;
  std::string eval_config;
  Index eval_k = 0, probe_epochs = 200;
  double probe_lr = 1e-3;
  auto* eval = app.add_subcommand("eval", "KNN / linear-probe accuracy of feature components");
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint directory")->required();
  eval->add_option("--train", eval_train_files, "training split files (.pht stem or CIFAR .bin)");
  eval->add_option("--test", eval_test_files, "test split files (.pht stem or CIFAR .bin)");
  eval->add_option("--config", eval_config, "take both splits and eval settings from a run config");
  eval->add_option("--components", eval_components, "comma list of h, z, h_r, h_n");
  eval->add_option("--method", eval_methods, "comma list of knn, linear");
  eval->add_option("--k", eval_k, "KNN neighbours (0: min(200, train/10))");
  eval->add_option("--probe-epochs", probe_epochs, "linear probe epochs");
  eval->add_option("--probe-lr", probe_lr, "linear probe learning rate");
  eval->add_option("--regime", eval_regime, "regime label for the CSV");
  eval->add_option("--out", eval_csv, "CSV output path")->required();

  // sweep
  std::string sweep_file;
  bool sweep_force = false;
  auto* sweep = app.add_subcommand("sweep", "run variants x seeds and summarise mean +- std");
  sweep->add_option("matrix", sweep_file, "sweep file")->required()->check(CLI::ExistingFile);
  sweep->add_flag("--force", sweep_force, "replace existing run directories");

  // export-features
  std::string export_checkpoint, export_out, export_component = "h";
  DataArgs export_data;
  auto* exporter = app.add_subcommand("export-features", "write one feature component as PHT1 + labels");
  exporter->add_option("--checkpoint", export_checkpoint, "checkpoint directory (not needed for x)");
  exporter->add_option("--component", export_component, "x (raw inputs), h, z, h_r or h_n")
      ->check(CLI::IsMember({"x", "h", "z", "h_r", "h_n"}));
  exporter->add_option("--out", export_out, "output stem; writes <stem>.pht and <stem>.labels")->required();
  add_data_options(exporter, export_data, "rows to export");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  if (*train) {
    ExperimentConfig config = load_config(train_config);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
      config.set(o.substr(0, eq), o.substr(eq + 1));
    }
    const TrainOutcome out = cmd_train(config, TrainOptions{force, quiet ? nullptr : &std::cerr});
    for (const auto& n : out.notices) std::cerr << "notice: " << n << '\n';
    for (const auto& r : out.final_eval) {
      std::cout << r.feature << ' ' << to_string(r.method) << ' ' << r.accuracy << '\n';
    }
    std::cout << "run: " << out.run_dir.string() << '\n';
    return 0;
  }
  if (*diagnose) {
    const LabeledDataset data = resolve_data(diag_data);
    const DiagnosticsReport r = cmd_diagnose(diag_checkpoint, data, diag_out);
    std::cout << "rank(H) " << r.rank_h << " rank(Z) " << r.rank_z << " deficit " << r.rank_deficit
              << '\n';
    for (const auto& f : r.files) std::cout << "wrote " << f.string() << '\n';
    return 0;
  }
  if (*eval) {
    EvalConfig cfg;
    LabeledDataset train_set, test_set;
    if (!eval_config.empty()) {
      const ExperimentConfig config = load_config(eval_config);
      const DataSplit split = load_experiment_data(config);
      train_set = split.train;
      test_set = split.test;
      cfg = config.eval.config;
    } else {
      if (eval_train_files.empty() || eval_test_files.empty()) {
        throw ConfigError("eval needs --train and --test files, or --config");
      }
      train_set = load_dataset_files(std::vector<fs::path>(eval_train_files.begin(), eval_train_files.end()));
      test_set = load_dataset_files(std::vector<fs::path>(eval_test_files.begin(), eval_test_files.end()));
      cfg.probe.epochs = probe_epochs;
      cfg.probe.learning_rate = probe_lr;
    }
    if (eval->count("--components") || eval_config.empty()) cfg.components = split_csv(eval_components);
    if (eval->count("--method") || eval_config.empty()) {
      cfg.methods.clear();
      for (const auto& m : split_csv(eval_methods)) cfg.methods.push_back(parse_eval_method(m));
    }
    if (eval->count("--k")) cfg.knn_k = eval_k;
    if (eval->count("--probe-epochs")) cfg.probe.epochs = probe_epochs;
    if (eval->count("--probe-lr")) cfg.probe.learning_rate = probe_lr;
    const auto reports = cmd_eval(eval_checkpoint, train_set, test_set, cfg, eval_csv, eval_regime);
    for (const auto& r : reports) {
      std::cout << r.feature << ' ' << to_string(r.method) << ' ' << r.accuracy << '\n';
    }
    return 0;
  }
  if (*sweep) {
    const SweepSpec spec = load_sweep(sweep_file);
    const SweepOutcome outcome = cmd_sweep(spec, worker_limit(), sweep_force, &std::cerr);
    print_sweep(outcome);
    return outcome.failed.empty() ? 0 : kExitSweepFailure;
  }
  if (*exporter) {
    if (export_component != "x" && export_checkpoint.empty()) {
      throw ConfigError("--checkpoint is required for component " + export_component);
    }
    const LabeledDataset data = resolve_data(export_data);
    cmd_export_features(export_checkpoint, data, export_component, export_out);
    std::cout << "wrote " << export_out << ".pht and " << export_out << ".labels\n";
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
