#include "phl/experiment.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace phl {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    os << content;
    if (!os) throw FormatError("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string epoch_tag(Index epoch) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "epoch_%04ld", static_cast<long>(epoch));
  return buf;
}

void write_labels(const fs::path& path, const std::vector<int>& labels) {
  std::ofstream os(path, std::ios::trunc);
  for (int l : labels) os << l << '\n';
  if (!os) throw FormatError("cannot write " + path.string());
}

std::vector<int> read_labels(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open label file " + path.string());
  std::vector<int> labels;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      std::size_t used = 0;
      labels.push_back(std::stoi(line, &used));
      if (used != line.size()) throw std::invalid_argument(line);
    } catch (const std::exception&) {
      throw FormatError("bad label line '" + line + "' in " + path.string());
    }
  }
  return labels;
}

LabeledDataset truncate(const LabeledDataset& data, Index limit) {
  if (limit <= 0 || limit >= data.size()) return data;
  std::vector<Index> rows(static_cast<std::size_t>(limit));
  for (Index i = 0; i < limit; ++i) rows[static_cast<std::size_t>(i)] = i;
  return data.subset(rows);
}

Json epoch_json(const EpochRecord& r) {
  return Json{{"epoch", r.epoch},
              {"regime", to_string(r.regime)},
              {"loss", r.loss},
              {"inner_losses", r.inner_losses},
              {"g_delta_norm", r.g_delta_norm},
              {"wall_ms", r.wall_ms}};
}

Json eval_json(Index epoch, const EvalReport& r) {
  Json j{{"record", "eval"},
         {"epoch", epoch},
         {"feature", r.feature},
         {"method", to_string(r.method)},
         {"accuracy", r.accuracy},
         {"correct", r.correct},
         {"train_size", r.train_size},
         {"test_size", r.test_size}};
  if (r.method == EvalMethod::Knn) {
    j["k"] = r.k;
  } else {
    j["epochs"] = r.epochs;
    j["learning_rate"] = r.learning_rate;
  }
  return j;
}

void write_eval_csv(const fs::path& path, const std::string& regime,
                    const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "regime,feature,method,accuracy\n";
  for (const auto& r : reports) {
    os << regime << ',' << r.feature << ',' << to_string(r.method) << ','
       << format_double(r.accuracy) << '\n';
  }
  write_atomic(path, os.str());
}

// Manifest kept in memory and rewritten atomically on every change.
class Manifest {
 public:
  Manifest(fs::path dir, const ExperimentConfig& config) : dir_(std::move(dir)) {
    Json echo = Json::object();
    for (const auto& [k, v] : config.entries()) echo[k] = v;
    doc_ = Json{{"format", "phl-run-1"},
                {"config_hash", config.hash()},
                {"config", echo},
                {"version", kVersion},
                {"started_at", utc_now()},
                {"finished_at", nullptr},
                {"status", "running"},
                {"artifacts", Json::array()},
                {"notices", Json::array()}};
  }

  void add_artifact(const fs::path& path) {
    const std::string rel = fs::relative(path, dir_).generic_string();
    for (const auto& a : doc_["artifacts"]) {
      if (a == rel) return;
    }
    doc_["artifacts"].push_back(rel);
  }
  void add_notice(const std::string& notice) { doc_["notices"].push_back(notice); }
  void finish(const std::string& status, const std::string& error = "") {
    doc_["finished_at"] = utc_now();
    doc_["status"] = status;
    if (!error.empty()) doc_["error"] = error;
    write();
  }
  void write() const { write_atomic(dir_ / "manifest.json", doc_.dump(2) + "\n"); }

 private:
  fs::path dir_;
  Json doc_;
};

// Refuses an existing, non-empty run directory unless forced; force only
// removes directories that a previous run created.
void prepare_run_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) {
      throw ConfigError("run directory " + dir.string() +
                        " already exists; pass --force to replace it");
    }
    if (!fs::exists(dir / "manifest.json")) {
      throw ConfigError("refusing to replace " + dir.string() +
                        ": it has no run manifest, so it was not created by a run");
    }
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

Tensor component_matrix(const Encoder& encoder, const Head& head, const Tensor& x,
                        const std::string& component) {
  if (component == "x") return x;
  const Features f = extract_features(encoder, head, x);
  if (component == "h") return f.h;
  if (component == "z") return f.z;
  if (component == "h_r" || component == "h_n") {
    const auto map = head.analysis_map();
    if (!map) {
      throw ConfigError(component + " needs a head with a linear map on h; head " +
                        to_string(head.kind) + " has none");
    }
    const auto split = null_space_decompose(*map, f.h);
    return component == "h_r" ? split.range : split.null;
  }
  throw ConfigError("unknown component '" + component + "' (expected x, h, z, h_r or h_n)");
}

void check_checkpoint_fits(const Checkpoint& ck, const LabeledDataset& data) {
  if (ck.encoder.input_dim() != data.dim()) {
    throw ShapeError("checkpoint encoder expects inputs of dimension " +
                     std::to_string(ck.encoder.input_dim()) + " but the dataset has " +
                     std::to_string(data.dim()));
  }
}

Json spectrum_json(const SpectrumReport& s, Index raw_rank) {
  return Json{{"eigenvalues", std::vector<double>(s.eigenvalues.data(),
                                                  s.eigenvalues.data() + s.eigenvalues.size())},
              {"rank", raw_rank},
              {"centered_rank", s.rank},
              {"centered_tolerance", s.tolerance}};
}

}  // namespace

// ---- data and model construction --------------------------------------------

DataSplit load_experiment_data(const ExperimentConfig& config) {
  if (config.data.kind == DataKind::Synthetic) {
    const LabeledDataset all = truncate(generate_synthetic(config.synth), config.data.limit);
    return split_dataset(all, config.data.test_fraction, config.data.split_seed);
  }
  std::vector<fs::path> paths(config.data.paths.begin(), config.data.paths.end());
  const LabeledDataset all = truncate(load_cifar10_binary(paths), config.data.limit);
  if (config.data.test_paths.empty()) {
    return split_dataset(all, config.data.test_fraction, config.data.split_seed);
  }
  std::vector<fs::path> test_paths(config.data.test_paths.begin(), config.data.test_paths.end());
  return DataSplit{all, load_cifar10_binary(test_paths)};
}

LabeledDataset load_dataset_files(const std::vector<fs::path>& paths) {
  if (paths.empty()) throw ConfigError("no dataset files given");
  if (paths.size() == 1 && paths[0].extension() == ".pht") {
    LabeledDataset data;
    data.examples = load_tensor(paths[0]);
    fs::path labels = paths[0];
    labels.replace_extension(".labels");
    data.labels = read_labels(labels);
    if (static_cast<Index>(data.labels.size()) != data.examples.rows()) {
      throw FormatError(labels.string() + " has " + std::to_string(data.labels.size()) +
                        " labels for " + std::to_string(data.examples.rows()) + " rows");
    }
    int max_label = 0;
    for (int l : data.labels) max_label = std::max(max_label, l);
    data.classes = max_label + 1;
    data.kind = DataKind::Synthetic;
    data.validate();
    return data;
  }
  for (const auto& p : paths) {
    if (p.extension() == ".pht") throw ConfigError("a .pht dataset must be given on its own");
  }
  return load_cifar10_binary(paths);
}

TrainSchedule schedule_for(const ExperimentConfig& config) {
  TrainSchedule s = config.train;
  s.seed = config.run.seed;
  return s;
}

Encoder initial_encoder(const ExperimentConfig& config) {
  return init_encoder(config.model.encoder, derive_seed(config.run.seed, 1));
}

Head initial_head(const ExperimentConfig& config) {
  const ModelSection& m = config.model;
  if (m.head == HeadKind::FixedPretrained) {
    const Checkpoint source = load_checkpoint(m.head_checkpoint);
    if (!is_linear_family(source.head.kind) || source.head.kind == HeadKind::DiagonalLowRank) {
      throw ConfigError("model.head_checkpoint: head " + to_string(source.head.kind) +
                        " has no affine map to copy into a fixed-pretrained head");
    }
    if (source.head.in_dim != m.m() || source.head.out_dim != m.d) {
      throw ShapeError("model.head_checkpoint: stored head maps " +
                       std::to_string(source.head.in_dim) + " -> " +
                       std::to_string(source.head.out_dim) + ", config wants " +
                       std::to_string(m.m()) + " -> " + std::to_string(m.d));
    }
    Head head = init_head(HeadKind::FixedPretrained, m.m(), m.d, std::nullopt, 0);
    head.param("head.A") = source.head.param("head.A");
    head.param("head.b") = source.head.param("head.b");
    return head;
  }
  const std::optional<Index> hidden =
      m.head == HeadKind::NonLinear ? std::optional<Index>(m.hidden) : std::nullopt;
  const Index d = m.head == HeadKind::None ? m.m() : m.d;
  return init_head(m.head, m.m(), d, hidden, derive_seed(config.run.seed, 2), m.batchnorm);
}

// ---- train -------------------------------------------------------------------

TrainOutcome cmd_train(const ExperimentConfig& config, const TrainOptions& options) {
  config.validate();
  const fs::path dir = config.run.output_dir;
  const DataSplit data = load_experiment_data(config);
  if (data.train.dim() != config.model.encoder.front()) {
    throw ShapeError("model.encoder: input size " + std::to_string(config.model.encoder.front()) +
                     " does not match data dimension " + std::to_string(data.train.dim()));
  }
  if (config.train.batch_size > data.train.size()) {
    throw ConfigError("train.batch_size: " + std::to_string(config.train.batch_size) +
                      " exceeds the " + std::to_string(data.train.size()) + " training examples");
  }

  TrainOutcome out;
  out.run_dir = dir;
  out.encoder = initial_encoder(config);
  out.head = initial_head(config);

  prepare_run_dir(dir, options.force);
  Manifest manifest(dir, config);
  manifest.write();

  try {
    const std::string regime = to_string(config.train.regime);
    auto checkpoint = [&](const std::string& name) {
      const fs::path ck = dir / "checkpoints" / name;
      save_checkpoint(ck, out.encoder, out.head);
      manifest.add_artifact(ck);
    };
    const std::set<Index> dump_epochs(config.output.feature_epochs.begin(),
                                      config.output.feature_epochs.end());
    auto dump_features = [&](Index epoch) {
      if (!dump_epochs.count(epoch)) return;
      const fs::path fdir = dir / "features";
      fs::create_directories(fdir);
      if (!fs::exists(fdir / "train.labels")) {
        write_labels(fdir / "train.labels", data.train.labels);
        manifest.add_artifact(fdir / "train.labels");
      }
      const Features f = extract_features(out.encoder, out.head, data.train.examples);
      const std::string tag = epoch_tag(epoch);
      save_tensor(fdir / (tag + ".h.pht"), f.h);
      save_tensor(fdir / (tag + ".z.pht"), f.z);
      manifest.add_artifact(fdir / (tag + ".h.pht"));
      manifest.add_artifact(fdir / (tag + ".z.pht"));
    };

    checkpoint("initial");
    if (config.train.epochs == 0) {
      manifest.finish("complete");
      return out;
    }
    dump_features(0);

    const fs::path metrics_path = dir / "metrics.jsonl";
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw FormatError("cannot write " + metrics_path.string());
    manifest.add_artifact(metrics_path);
    manifest.write();

    std::set<std::string> noticed;
    auto evaluate_now = [&](Index epoch) {
      const ComponentEval ce =
          component_eval(out.encoder, out.head, data.train, data.test, config.eval.config);
      for (const auto& r : ce.reports) metrics << eval_json(epoch, r).dump() << '\n';
      for (const auto& n : ce.notices) {
        if (noticed.insert(n).second) {
          manifest.add_notice(n);
          out.notices.push_back(n);
        }
      }
      return ce.reports;
    };

    const Augmenter augmenter(data.train.kind, config.aug, data.train.synthetic);
    const Index epochs = config.train.epochs;
    auto sink = [&](const EpochRecord& record, const Encoder& encoder, const Head& head) {
      out.encoder = encoder;
      out.head = head;
      metrics << epoch_json(record).dump() << '\n';
      if (options.log) {
        *options.log << regime << " epoch " << record.epoch << "/" << epochs << " loss "
                     << record.loss << " |dg| " << record.g_delta_norm << '\n';
      }
      dump_features(record.epoch);
      const Index every = config.output.checkpoint_every;
      if (every > 0 && record.epoch % every == 0 && record.epoch != epochs) {
        checkpoint(epoch_tag(record.epoch));
      }
      if (config.eval.every > 0 && record.epoch % config.eval.every == 0 && record.epoch != epochs) {
        evaluate_now(record.epoch);
      }
      metrics.flush();
    };

    Encoder encoder = out.encoder;
    Head head = out.head;
    out.metrics = run_schedule(schedule_for(config), data.train, augmenter, encoder, head, sink);
    out.encoder = encoder;
    out.head = head;
    checkpoint("final");

    if (!config.eval.config.components.empty() && !config.eval.config.methods.empty()) {
      out.final_eval = evaluate_now(epochs);
      write_eval_csv(dir / "eval.csv", regime, out.final_eval);
      manifest.add_artifact(dir / "eval.csv");
    }
    metrics.close();
    if (!metrics) throw FormatError("failed writing " + metrics_path.string());
    manifest.finish("complete");
  } catch (const std::exception& e) {
    manifest.finish("failed", e.what());
    throw;
  }
  return out;
}

// ---- diagnose ----------------------------------------------------------------

DiagnosticsReport cmd_diagnose(const fs::path& checkpoint, const LabeledDataset& data,
                               const fs::path& out_dir) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  check_checkpoint_fits(ck, data);
  const Features f = extract_features(ck.encoder, ck.head, data.examples);

  DiagnosticsReport report;
  report.h = covariance_spectrum(f.h);
  report.z = covariance_spectrum(f.z);
  report.rank_h = numerical_rank(f.h);
  report.rank_z = numerical_rank(f.z);
  report.rank_deficit = report.rank_h - report.rank_z;

  fs::create_directories(out_dir);
  Json doc{{"checkpoint", checkpoint.generic_string()},
           {"head_kind", to_string(ck.head.kind)},
           {"examples", data.size()},
           {"m", ck.head.in_dim},
           {"d", ck.head.out_dim},
           {"H", spectrum_json(report.h, report.rank_h)},
           {"Z", spectrum_json(report.z, report.rank_z)},
           {"rank_H", report.rank_h},
           {"rank_Z", report.rank_z},
           {"rank_deficit", report.rank_deficit}};

  if (is_linear_family(ck.head.kind)) {
    const Tensor a = *ck.head.analysis_map();
    // rank(Z) <= rank(H) for Z = H A^T; the bias is dropped because a
    // constant shift can add one to the raw rank.
    const Tensor ha = f.h * a.transpose();
    report.rank_ha = numerical_rank(ha);
    doc["rank_HA"] = *report.rank_ha;
    if (*report.rank_ha > report.rank_h) {
      throw NumericalError("diagnose: rank(H A^T) = " + std::to_string(*report.rank_ha) +
                           " exceeds rank(H) = " + std::to_string(report.rank_h));
    }
    const auto split = null_space_decompose(a, f.h);
    const fs::path hr = out_dir / "h_r.pht";
    const fs::path hn = out_dir / "h_n.pht";
    save_tensor(hr, split.range);
    save_tensor(hn, split.null);
    report.files.push_back(hr);
    report.files.push_back(hn);
    doc["h_r"] = hr.filename().generic_string();
    doc["h_n"] = hn.filename().generic_string();
    doc["rank_Hr"] = numerical_rank(split.range);
    doc["rank_Hn"] = numerical_rank(split.null);
  }
  const fs::path json_path = out_dir / "diagnostics.json";
  write_atomic(json_path, doc.dump(2) + "\n");
  report.files.insert(report.files.begin(), json_path);
  return report;
}

// ---- eval and export ---------------------------------------------------------

std::vector<EvalReport> cmd_eval(const fs::path& checkpoint, const LabeledDataset& train,
                                 const LabeledDataset& test, const EvalConfig& config,
                                 const fs::path& csv_path, const std::string& regime_label) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  check_checkpoint_fits(ck, train);
  check_checkpoint_fits(ck, test);
  if (!ck.head.analysis_map()) {
    for (const auto& c : config.components) {
      if (c == "h_r" || c == "h_n") {
        throw ConfigError("component " + c + " needs a head with a linear map on h; head " +
                          to_string(ck.head.kind) + " has none");
      }
    }
  }
  const ComponentEval ce = component_eval(ck.encoder, ck.head, train, test, config);
  std::string regime = regime_label;
  if (regime.empty()) {
    // A checkpoint inside a run directory inherits the run's regime.
    const fs::path manifest = checkpoint.parent_path().parent_path() / "manifest.json";
    std::ifstream is(manifest);
    if (is) {
      const Json doc = Json::parse(is, nullptr, false);
      if (!doc.is_discarded() && doc.contains("config")) {
        regime = doc["config"].value("train.regime", "");
      }
    }
    if (regime.empty()) regime = to_string(ck.head.kind);
  }
  if (!csv_path.empty()) {
    if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
    write_eval_csv(csv_path, regime, ce.reports);
  }
  return ce.reports;
}

void cmd_export_features(const fs::path& checkpoint, const LabeledDataset& data,
                         const std::string& component, const fs::path& stem) {
  if (component == "x") {
    export_dataset(data, stem);
    return;
  }
  const Checkpoint ck = load_checkpoint(checkpoint);
  check_checkpoint_fits(ck, data);
  const Tensor m = component_matrix(ck.encoder, ck.head, data.examples, component);
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  save_tensor(fs::path(stem.string() + ".pht"), m);
  write_labels(fs::path(stem.string() + ".labels"), data.labels);
}

// ---- sweep -------------------------------------------------------------------

namespace {

struct VariantPreset {
  const char* name;
  Regime regime;
  HeadKind head;
  PcaSide side = PcaSide::Top;
};

const std::vector<VariantPreset>& presets() {
  static const std::vector<VariantPreset> p{
      {"nohead", Regime::NoHead, HeadKind::None},
      {"joint", Regime::Joint, HeadKind::Linear},
      {"bilevel", Regime::Bilevel, HeadKind::Linear},
      {"joint-nonlinear", Regime::Joint, HeadKind::NonLinear},
      {"bilevel-nonlinear", Regime::Bilevel, HeadKind::NonLinear},
      {"fixed-random", Regime::FixedHead, HeadKind::FixedRandom},
      {"fixed-pretrained", Regime::FixedHead, HeadKind::FixedPretrained},
      {"directclr", Regime::FixedHead, HeadKind::DiagonalLowRank},
      {"pca-top", Regime::PCARefresh, HeadKind::PCALinear, PcaSide::Top},
      {"pca-bottom", Regime::PCARefresh, HeadKind::PCALinear, PcaSide::Bottom},
      {"slow-single", Regime::SlowSingle, HeadKind::Linear},
      {"slow-optimal", Regime::SlowOptimal, HeadKind::Linear},
  };
  return p;
}

const VariantPreset& preset(const std::string& name) {
  for (const auto& p : presets()) {
    if (name == p.name) return p;
  }
  throw ConfigError("unknown sweep variant '" + name + "'");
}

struct Job {
  std::string variant;
  std::uint64_t seed;
};

// Reads a run's eval.csv back into (feature, method, accuracy) triples.
std::vector<std::tuple<std::string, std::string, double>> read_eval_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("missing " + path.string());
  std::vector<std::tuple<std::string, std::string, double>> rows;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string regime, feature, method, acc;
    std::getline(ss, regime, ',');
    std::getline(ss, feature, ',');
    std::getline(ss, method, ',');
    std::getline(ss, acc, ',');
    rows.emplace_back(feature, method, std::stod(acc));
  }
  return rows;
}

}  // namespace

std::vector<std::string> sweep_variants() {
  std::vector<std::string> names;
  for (const auto& p : presets()) names.emplace_back(p.name);
  return names;
}

int worker_limit() {
  const char* env = std::getenv("PHL_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("PHL_THREADS must be a positive integer");
  return static_cast<int>(std::min<long>(v, 256));
}

SweepSpec parse_sweep(const std::string& text, const std::string& origin) {
  SweepSpec spec;
  std::string base_text;
  std::istringstream in(text);
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    std::string body = line.substr(0, line.find('#'));
    const auto eq = body.find('=');
    const auto first = body.find_first_not_of(" \t");
    if (eq == std::string::npos || first == std::string::npos ||
        body.compare(first, 6, "sweep.") != 0) {
      base_text += line + "\n";
      continue;
    }
    base_text += "\n";  // keep line numbers aligned for base-config errors
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    const std::string where = origin + ":" + std::to_string(number) + ": ";
    std::vector<std::string> items;
    {
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!trim(item).empty()) items.push_back(trim(item));
      }
    }
    try {
      if (key == "sweep.variants") {
        for (const auto& v : items) preset(v);
        spec.variants = items;
      } else if (key == "sweep.seeds") {
        spec.seeds.clear();
        for (const auto& s : items) spec.seeds.push_back(std::stoull(s));
      } else if (key == "sweep.output_dir") {
        spec.output_dir = value;
      } else if (key == "sweep.nonlinear_hidden") {
        spec.nonlinear_hidden = std::stol(value);
      } else {
        throw ConfigError("unknown sweep key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    } catch (const std::exception&) {
      throw ConfigError(where + key + ": bad value '" + value + "'");
    }
  }
  spec.base = parse_config(base_text, origin);
  if (spec.variants.empty()) throw ConfigError(origin + ": sweep.variants is empty");
  if (spec.seeds.empty()) throw ConfigError(origin + ": sweep.seeds is empty");
  if (spec.nonlinear_hidden < 1) throw ConfigError(origin + ": sweep.nonlinear_hidden must be >= 1");
  return spec;
}

SweepSpec load_sweep(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open sweep file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_sweep(ss.str(), path.string());
}

fs::path variant_run_dir(const SweepSpec& spec, const std::string& variant, std::uint64_t seed) {
  return spec.output_dir / variant / ("seed_" + std::to_string(seed));
}

ExperimentConfig variant_config(const SweepSpec& spec, const std::string& variant,
                                std::uint64_t seed) {
  const VariantPreset& p = preset(variant);
  ExperimentConfig c = spec.base;
  c.run.seed = seed;
  c.run.output_dir = variant_run_dir(spec, variant, seed).string();
  c.train.regime = p.regime;
  c.train.pca_side = p.side;
  c.model.head = p.head;
  c.model.hidden = p.head == HeadKind::NonLinear ? spec.nonlinear_hidden : 0;
  c.model.head_checkpoint.clear();
  if (p.head == HeadKind::FixedPretrained) {
    c.model.head_checkpoint =
        (variant_run_dir(spec, "joint", seed) / "checkpoints" / "final").string();
  }
  return c;
}

SweepOutcome cmd_sweep(const SweepSpec& spec, int workers, bool force, std::ostream* log) {
  if (workers < 1) throw ConfigError("sweep: need at least one worker");
  std::vector<std::string> variants = spec.variants;
  const bool pretrained = std::count(variants.begin(), variants.end(), "fixed-pretrained") > 0;
  if (pretrained && std::count(variants.begin(), variants.end(), "joint") == 0) {
    variants.insert(variants.begin(), "joint");  // source of the pretrained head
  }
  // Validate every child config up front (fixed-pretrained checkpoints do
  // not exist yet, so only the rest of its config is checked).
  for (const auto& v : variants) {
    for (std::uint64_t s : spec.seeds) {
      ExperimentConfig c = variant_config(spec, v, s);
      c.validate();
    }
  }

  fs::create_directories(spec.output_dir);
  std::vector<std::vector<Job>> phases(2);
  for (const auto& v : variants) {
    for (std::uint64_t s : spec.seeds) phases[v == "fixed-pretrained" ? 1 : 0].push_back({v, s});
  }

  SweepOutcome outcome;
  std::map<std::pair<std::string, std::uint64_t>, bool> succeeded;
  auto run_phase = [&](const std::vector<Job>& jobs) {
    std::map<pid_t, Job> running;
    std::size_t next = 0;
    auto reap_one = [&] {
      int status = 0;
      const pid_t pid = ::wait(&status);
      if (pid < 0) throw Error("sweep: wait failed");
      const Job job = running.at(pid);
      running.erase(pid);
      const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0;
      succeeded[{job.variant, job.seed}] = ok;
      if (log) {
        *log << "sweep: " << job.variant << " seed " << job.seed << (ok ? " done" : " FAILED") << '\n';
      }
      if (!ok) {
        std::string reason = WIFEXITED(status) ? "exit code " + std::to_string(WEXITSTATUS(status))
                                               : "terminated by a signal";
        std::ifstream is(variant_run_dir(spec, job.variant, job.seed) / "manifest.json");
        if (is) {
          const Json doc = Json::parse(is, nullptr, false);
          if (!doc.is_discarded() && doc.contains("error")) reason = doc["error"].get<std::string>();
        }
        outcome.failed.push_back(job.variant + "/seed_" + std::to_string(job.seed) + ": " + reason);
      }
    };
    while (next < jobs.size() || !running.empty()) {
      while (next < jobs.size() && static_cast<int>(running.size()) < workers) {
        const Job job = jobs[next++];
        if (job.variant == "fixed-pretrained" && !succeeded[{"joint", job.seed}]) {
          succeeded[{job.variant, job.seed}] = false;
          outcome.failed.push_back(job.variant + "/seed_" + std::to_string(job.seed) +
                                   ": joint run for this seed failed, no pretrained head");
          continue;
        }
        if (log) log->flush();
        const pid_t pid = ::fork();
        if (pid < 0) throw Error("sweep: fork failed");
        if (pid == 0) {
          int code = 0;
          try {
            cmd_train(variant_config(spec, job.variant, job.seed), TrainOptions{force, nullptr});
          } catch (const ConfigError&) {
            code = 2;
          } catch (const FormatError&) {
            code = 2;
          } catch (const ShapeError&) {
            code = 2;
          } catch (...) {
            code = 3;
          }
          std::fflush(nullptr);
          ::_exit(code);
        }
        running[pid] = job;
      }
      if (!running.empty()) reap_one();
    }
  };
  for (const auto& phase : phases) run_phase(phase);

  // Aggregate in variant order, then feature/method order of first appearance.
  std::ostringstream csv;
  csv << "variant,regime,head,feature,method,mean,std,runs\n";
  for (const auto& v : variants) {
    std::vector<std::pair<std::string, std::string>> order;
    std::map<std::pair<std::string, std::string>, std::vector<double>> values;
    for (std::uint64_t s : spec.seeds) {
      if (!succeeded[{v, s}]) continue;
      for (const auto& [feature, method, acc] :
           read_eval_csv(variant_run_dir(spec, v, s) / "eval.csv")) {
        const auto key = std::make_pair(feature, method);
        if (!values.count(key)) order.push_back(key);
        values[key].push_back(acc);
      }
    }
    const VariantPreset& p = preset(v);
    for (const auto& key : order) {
      const auto& xs = values[key];
      SweepRow row;
      row.variant = v;
      row.regime = to_string(p.regime);
      row.head = to_string(p.head);
      row.feature = key.first;
      row.method = key.second;
      row.runs = static_cast<Index>(xs.size());
      for (double x : xs) row.mean += x;
      row.mean /= static_cast<double>(xs.size());
      if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - row.mean) * (x - row.mean);
        row.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
      }
      csv << row.variant << ',' << row.regime << ',' << row.head << ',' << row.feature << ','
          << row.method << ',' << format_double(row.mean) << ',' << format_double(row.std) << ','
          << row.runs << '\n';
      outcome.rows.push_back(row);
    }
  }
  outcome.summary_csv = spec.output_dir / "summary.csv";
  write_atomic(outcome.summary_csv, csv.str());

  Json runs = Json::array();
  for (const auto& v : variants) {
    for (std::uint64_t s : spec.seeds) {
      runs.push_back(Json{{"variant", v},
                          {"seed", s},
                          {"run_dir", fs::relative(variant_run_dir(spec, v, s), spec.output_dir).generic_string()},
                          {"status", succeeded[{v, s}] ? "complete" : "failed"}});
    }
  }
  const Json manifest{{"format", "phl-sweep-1"},
                      {"base_config_hash", spec.base.hash()},
                      {"version", kVersion},
                      {"finished_at", utc_now()},
                      {"runs", runs},
                      {"failed", outcome.failed},
                      {"artifacts", Json::array({"summary.csv"})}};
  write_atomic(spec.output_dir / "manifest.json", manifest.dump(2) + "\n");
  return outcome;
}

}  // namespace phl
