#include "phl/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace phl {

std::string to_string(DataKind kind) { return kind == DataKind::Cifar10 ? "cifar10" : "synthetic"; }

DataKind parse_data_kind(const std::string& text) {
  if (text == "cifar10") return DataKind::Cifar10;
  if (text == "synthetic") return DataKind::Synthetic;
  throw ConfigError("unknown data kind '" + text + "' (expected cifar10 or synthetic)");
}

std::string format_double(double value) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, r.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  if (trim(text).empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& items, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    out += f(items[i]);
  }
  return out;
}

// Text codecs. Each parse throws a bare ConfigError; the caller prefixes the key.
template <typename T>
struct Codec;

template <>
struct Codec<Index> {
  static std::string format(Index v) { return std::to_string(v); }
  static Index parse(const std::string& s) {
    Index v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw ConfigError("expected an integer, got '" + s + "'");
    }
    return v;
  }
};

template <>
struct Codec<int> {
  static std::string format(int v) { return std::to_string(v); }
  static int parse(const std::string& s) { return static_cast<int>(Codec<Index>::parse(s)); }
};

template <>
struct Codec<std::uint64_t> {
  static std::string format(std::uint64_t v) { return std::to_string(v); }
  static std::uint64_t parse(const std::string& s) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw ConfigError("expected a non-negative integer, got '" + s + "'");
    }
    return v;
  }
};

template <>
struct Codec<double> {
  static std::string format(double v) { return format_double(v); }
  static double parse(const std::string& s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw ConfigError("expected a number, got '" + s + "'");
    }
    return v;
  }
};

template <>
struct Codec<bool> {
  static std::string format(bool v) { return v ? "true" : "false"; }
  static bool parse(const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError("expected true or false, got '" + s + "'");
  }
};

template <>
struct Codec<std::string> {
  static std::string format(const std::string& v) { return v; }
  static std::string parse(const std::string& s) { return s; }
};

template <typename T>
struct Codec<std::vector<T>> {
  static std::string format(const std::vector<T>& v) {
    return join<T>(v, [](const T& x) { return Codec<T>::format(x); });
  }
  static std::vector<T> parse(const std::string& s) {
    std::vector<T> out;
    for (const auto& item : split_list(s)) out.push_back(Codec<T>::parse(item));
    return out;
  }
};

#define PHL_ENUM_CODEC(Type, parser)                                        \
  template <>                                                               \
  struct Codec<Type> {                                                      \
    static std::string format(Type v) { return to_string(v); }              \
    static Type parse(const std::string& s) { return parser(s); }           \
  };

PHL_ENUM_CODEC(DataKind, parse_data_kind)
PHL_ENUM_CODEC(HeadKind, parse_head_kind)
PHL_ENUM_CODEC(Regime, parse_regime)
PHL_ENUM_CODEC(NegativePolicy, parse_negative_policy)
PHL_ENUM_CODEC(OptimizerKind, parse_optimizer_kind)
PHL_ENUM_CODEC(PcaSide, parse_pca_side)
PHL_ENUM_CODEC(EvalMethod, parse_eval_method)
#undef PHL_ENUM_CODEC

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

// Binds a key to a member reached through `access`.
template <typename T, typename Access>
Field bind(std::string key, Access access) {
  return {std::move(key),
          [access](const ExperimentConfig& c) {
            return Codec<T>::format(access(const_cast<ExperimentConfig&>(c)));
          },
          [access](ExperimentConfig& c, const std::string& v) { access(c) = Codec<T>::parse(v); }};
}

// The optimizer keys drive both the encoder and the head optimizer; the
// bilevel inner optimizer derives from the head one with weight decay off.
template <typename T, typename Member>
Field optimizer_field(std::string key, Member member) {
  return {std::move(key),
          [member](const ExperimentConfig& c) { return Codec<T>::format(c.train.encoder_optimizer.*member); },
          [member](ExperimentConfig& c, const std::string& v) {
            const T parsed = Codec<T>::parse(v);
            c.train.encoder_optimizer.*member = parsed;
            c.train.head_optimizer.*member = parsed;
          }};
}

#define PHL_FIELD(T, key, expr) bind<T>(key, [](ExperimentConfig& c) -> T& { return c.expr; })

const std::vector<Field>& registry() {
  static const std::vector<Field> fields = {
      PHL_FIELD(std::uint64_t, "run.seed", run.seed),
      PHL_FIELD(std::string, "run.output_dir", run.output_dir),

      PHL_FIELD(DataKind, "data.kind", data.kind),
      PHL_FIELD(std::vector<std::string>, "data.paths", data.paths),
      PHL_FIELD(std::vector<std::string>, "data.test_paths", data.test_paths),
      PHL_FIELD(double, "data.test_fraction", data.test_fraction),
      PHL_FIELD(Index, "data.limit", data.limit),
      PHL_FIELD(std::uint64_t, "data.split_seed", data.split_seed),

      PHL_FIELD(Index, "synth.content_dim", synth.content_dim),
      PHL_FIELD(Index, "synth.style_dim", synth.style_dim),
      PHL_FIELD(int, "synth.classes", synth.classes),
      PHL_FIELD(Index, "synth.samples_per_class", synth.samples_per_class),
      PHL_FIELD(double, "synth.content_separation", synth.content_separation),
      PHL_FIELD(double, "synth.style_scale", synth.style_scale),
      PHL_FIELD(double, "synth.content_noise", synth.content_noise),
      PHL_FIELD(std::uint64_t, "synth.seed", synth.seed),

      PHL_FIELD(bool, "aug.crop", aug.crop),
      PHL_FIELD(double, "aug.crop_scale_min", aug.crop_scale_min),
      PHL_FIELD(double, "aug.crop_scale_max", aug.crop_scale_max),
      PHL_FIELD(double, "aug.aspect_min", aug.aspect_min),
      PHL_FIELD(double, "aug.aspect_max", aug.aspect_max),
      PHL_FIELD(bool, "aug.flip", aug.flip),
      PHL_FIELD(double, "aug.flip_prob", aug.flip_prob),
      PHL_FIELD(bool, "aug.jitter", aug.jitter),
      PHL_FIELD(double, "aug.jitter_prob", aug.jitter_prob),
      PHL_FIELD(double, "aug.brightness", aug.brightness),
      PHL_FIELD(double, "aug.contrast", aug.contrast),
      PHL_FIELD(double, "aug.saturation", aug.saturation),
      PHL_FIELD(double, "aug.hue", aug.hue),
      PHL_FIELD(bool, "aug.grayscale", aug.grayscale),
      PHL_FIELD(double, "aug.grayscale_prob", aug.grayscale_prob),
      PHL_FIELD(bool, "aug.style_resample", aug.style_resample),
      PHL_FIELD(double, "aug.noise_sigma", aug.noise_sigma),

      PHL_FIELD(std::vector<Index>, "model.encoder", model.encoder),
      PHL_FIELD(HeadKind, "model.head", model.head),
      PHL_FIELD(Index, "model.d", model.d),
      PHL_FIELD(Index, "model.hidden", model.hidden),
      PHL_FIELD(bool, "model.batchnorm", model.batchnorm),
      PHL_FIELD(std::string, "model.head_checkpoint", model.head_checkpoint),

      PHL_FIELD(Regime, "train.regime", train.regime),
      PHL_FIELD(Index, "train.epochs", train.epochs),
      PHL_FIELD(Index, "train.batch_size", train.batch_size),
      PHL_FIELD(double, "train.temperature", train.loss.temperature),
      PHL_FIELD(bool, "train.include_positive", train.loss.include_positive),
      PHL_FIELD(NegativePolicy, "train.negatives", train.loss.policy),
      optimizer_field<OptimizerKind>("train.optimizer", &OptimizerConfig::kind),
      optimizer_field<double>("train.lr", &OptimizerConfig::learning_rate),
      optimizer_field<double>("train.weight_decay", &OptimizerConfig::weight_decay),
      optimizer_field<double>("train.momentum", &OptimizerConfig::momentum),
      PHL_FIELD(Index, "train.inner_steps", train.inner_steps),
      PHL_FIELD(double, "train.proximal", train.proximal),
      PHL_FIELD(bool, "train.persistent_inner", train.persistent_inner),
      PHL_FIELD(PcaSide, "train.pca_side", train.pca_side),
      PHL_FIELD(Index, "train.pca_subset", train.pca_subset),
      PHL_FIELD(double, "train.slow_tolerance", train.slow_tolerance),
      PHL_FIELD(Index, "train.slow_max_iters", train.slow_max_iters),
      PHL_FIELD(Index, "train.slow_subset", train.slow_subset),

      PHL_FIELD(std::vector<std::string>, "eval.components", eval.config.components),
      PHL_FIELD(std::vector<EvalMethod>, "eval.methods", eval.config.methods),
      PHL_FIELD(Index, "eval.knn_k", eval.config.knn_k),
      PHL_FIELD(Index, "eval.probe_epochs", eval.config.probe.epochs),
      PHL_FIELD(double, "eval.probe_lr", eval.config.probe.learning_rate),
      PHL_FIELD(double, "eval.probe_weight_decay", eval.config.probe.weight_decay),
      PHL_FIELD(Index, "eval.probe_batch_size", eval.config.probe.batch_size),
      PHL_FIELD(bool, "eval.probe_standardize", eval.config.probe.standardize),
      PHL_FIELD(Index, "eval.every", eval.every),

      PHL_FIELD(std::vector<Index>, "output.feature_epochs", output.feature_epochs),
      PHL_FIELD(Index, "output.checkpoint_every", output.checkpoint_every),
  };
  return fields;
}

#undef PHL_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& f : registry()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

[[noreturn]] void fail(const std::string& key, const std::string& message) {
  throw ConfigError(key + ": " + message);
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : registry()) keys.push_back(f.key);
  return keys;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  const Field& field = find_field(key);
  try {
    field.set(*this, value);
  } catch (const ConfigError& e) {
    fail(key, e.what());
  }
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : registry()) out.emplace_back(f.key, f.get(*this));
  return out;
}

std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
  return out;
}

std::string ExperimentConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, v] : entries()) {
    if (k == "run.output_dir") continue;
    for (char ch : k + "=" + v + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void ExperimentConfig::validate() const {
  auto nested = [](const std::string& section, const auto& validator) {
    try {
      validator();
    } catch (const ConfigError& e) {
      fail(section, e.what());
    }
  };

  if (model.encoder.size() < 2) fail("model.encoder", "needs at least input and output sizes");
  for (Index s : model.encoder) {
    if (s < 1) fail("model.encoder", "layer sizes must be >= 1");
  }
  const Index m = model.m();
  const Index p = model.encoder.front();
  if (data.kind == DataKind::Synthetic) {
    nested("synth", [&] { synth.validate(); });
    if (p != synth.content_dim + synth.style_dim) {
      fail("model.encoder", "input size " + std::to_string(p) + " must equal content_dim + style_dim = " +
                                std::to_string(synth.content_dim + synth.style_dim));
    }
  } else {
    if (data.paths.empty()) fail("data.paths", "cifar10 needs at least one batch file");
    if (p != kCifarImageBytes) {
      fail("model.encoder", "input size must be 3072 for cifar10, got " + std::to_string(p));
    }
  }
  if (data.test_paths.empty() && !(data.test_fraction > 0.0 && data.test_fraction < 1.0)) {
    fail("data.test_fraction", "must lie in (0, 1) when no test files are given");
  }
  if (data.limit < 0) fail("data.limit", "must be >= 0");
  if (data.limit > 0 && data.kind == DataKind::Synthetic) {
    fail("data.limit", "synthetic rows are grouped by class; size the set with synth.samples_per_class");
  }
  nested("aug", [&] { aug.validate(); });

  if (model.head != HeadKind::None && (model.d < 1 || model.d > m)) {
    fail("model.d", "must satisfy 1 <= d <= m = " + std::to_string(m) + ", got " + std::to_string(model.d));
  }
  if (model.head == HeadKind::NonLinear && model.hidden < 1) {
    fail("model.hidden", "nonlinear head needs a hidden width >= 1");
  }
  if (model.head != HeadKind::NonLinear && model.hidden != 0) {
    fail("model.hidden", "only the nonlinear head has a hidden layer");
  }
  if (model.head == HeadKind::FixedPretrained && model.head_checkpoint.empty()) {
    fail("model.head_checkpoint", "fixed-pretrained head needs a checkpoint directory");
  }
  if (model.head != HeadKind::FixedPretrained && !model.head_checkpoint.empty()) {
    fail("model.head_checkpoint", "only the fixed-pretrained head loads a checkpoint");
  }
  try {
    check_regime_head(train.regime, model.head);
  } catch (const ConfigError& e) {
    fail("train.regime", e.what());
  }

  if (train.batch_size < 2) {
    fail("train.batch_size", "must be >= 2: InfoNCE needs at least one negative per anchor, got " +
                                 std::to_string(train.batch_size));
  }
  if (train.epochs < 0) fail("train.epochs", "must be >= 0, got " + std::to_string(train.epochs));
  if (train.regime == Regime::PCARefresh && train.pca_subset <= m) {
    fail("train.pca_subset", "must exceed m = " + std::to_string(m) + " for a covariance estimate");
  }
  nested("train", [&] { train.validate(); });
  try {
    Optimizer check(train.encoder_optimizer);
  } catch (const ConfigError& e) {
    fail("train.lr", e.what());
  }

  static const std::set<std::string> components{"h", "z", "h_r", "h_n"};
  for (const auto& c : eval.config.components) {
    if (!components.count(c)) fail("eval.components", "unknown component '" + c + "'");
  }
  if (eval.config.knn_k < 0) fail("eval.knn_k", "must be >= 0 (0 selects the default)");
  if (eval.config.probe.epochs < 0) fail("eval.probe_epochs", "must be >= 0");
  if (!(eval.config.probe.learning_rate > 0.0)) fail("eval.probe_lr", "must be > 0");
  if (eval.every < 0) fail("eval.every", "must be >= 0");
  for (Index e : output.feature_epochs) {
    if (e < 0 || e > train.epochs) {
      fail("output.feature_epochs", "epoch " + std::to_string(e) + " outside [0, " +
                                        std::to_string(train.epochs) + "]");
    }
  }
  if (output.checkpoint_every < 0) fail("output.checkpoint_every", "must be >= 0");
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  ExperimentConfig config;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(number) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      config.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

}  // namespace phl
