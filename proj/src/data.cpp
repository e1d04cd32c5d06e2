#include "phl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

namespace phl {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Tensor gaussian(Index rows, Index cols, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor t(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) t(r, c) = sigma * dist(rng);
  }
  return t;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

void LabeledDataset::validate() const {
  if (examples.rows() <= 0) throw FormatError("dataset is empty");
  if (static_cast<Index>(labels.size()) != examples.rows()) {
    throw ShapeError("dataset: label count does not match example count");
  }
  if (classes < 1) throw FormatError("dataset: class count must be positive");
  for (int l : labels) {
    if (l < 0 || l >= classes) throw FormatError("dataset: label out of range");
  }
  if (!examples.allFinite()) throw NumericalError("dataset: non-finite feature value");
}

LabeledDataset LabeledDataset::subset(const std::vector<Index>& rows) const {
  LabeledDataset out;
  out.classes = classes;
  out.kind = kind;
  out.synthetic = synthetic;
  out.examples.resize(static_cast<Index>(rows.size()), dim());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.examples.row(static_cast<Index>(i)) = examples.row(rows[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

void SynthConfig::validate() const {
  if (classes < 2) throw ConfigError("synthetic: class count must be at least 2");
  if (samples_per_class < 1) throw ConfigError("synthetic: samples_per_class must be >= 1");
  if (content_dim < 1) throw ConfigError("synthetic: content_dim must be >= 1");
  if (style_dim < 0) throw ConfigError("synthetic: style_dim must be >= 0");
  if (!(content_separation > 0.0)) throw ConfigError("synthetic: content_separation must be > 0");
  if (!(style_scale >= 0.0)) throw ConfigError("synthetic: style_scale must be >= 0");
  if (!(content_noise >= 0.0)) throw ConfigError("synthetic: content_noise must be >= 0");
}

LabeledDataset load_cifar10_binary(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw FormatError("cifar10: empty path list");
  std::vector<unsigned char> bytes;
  for (const auto& path : paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cifar10: cannot open " + path.string());
    std::vector<unsigned char> file((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    if (file.size() % kCifarRecordBytes != 0) {
      throw FormatError("cifar10: malformed record stream in " + path.string() + " (" +
                        std::to_string(file.size()) + " bytes is not a multiple of 3073)");
    }
    bytes.insert(bytes.end(), file.begin(), file.end());
  }
  const Index n = static_cast<Index>(bytes.size()) / kCifarRecordBytes;
  if (n == 0) throw FormatError("cifar10: no records");

  LabeledDataset ds;
  ds.kind = DataKind::Cifar10;
  ds.classes = 10;
  ds.examples.resize(n, kCifarImageBytes);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] >= 10) {
      throw FormatError("cifar10: label byte " + std::to_string(rec[0]) + " in record " +
                        std::to_string(i));
    }
    ds.labels[static_cast<std::size_t>(i)] = rec[0];
    for (Index k = 0; k < kCifarImageBytes; ++k) ds.examples(i, k) = rec[1 + k] / 255.0;
  }
  return ds;
}

LabeledDataset generate_synthetic(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(derive_seed(config.seed, 0x5e7));
  const Index p = config.content_dim + config.style_dim;

  auto model = std::make_shared<SyntheticModel>();
  model->content_dim = config.content_dim;
  model->style_dim = config.style_dim;
  model->style_scale = config.style_scale;

  // Centers: Gaussian draws, rejected until pairwise separation holds.
  const double spread = config.content_separation;
  Tensor centers(config.classes, config.content_dim);
  for (int attempt = 0;; ++attempt) {
    const double grow = 1.0 + 0.05 * (attempt / 100);
    centers = gaussian(config.classes, config.content_dim, spread * grow, rng);
    double closest = std::numeric_limits<double>::infinity();
    for (Index a = 0; a < centers.rows(); ++a) {
      for (Index b = a + 1; b < centers.rows(); ++b) {
        closest = std::min(closest, (centers.row(a) - centers.row(b)).norm());
      }
    }
    if (closest >= config.content_separation) break;
  }
  model->centers = centers;

  const Tensor seed_matrix = gaussian(p, p, 1.0, rng);
  Eigen::HouseholderQR<Tensor> qr(seed_matrix);
  model->mixing = qr.householderQ() * Tensor::Identity(p, p);

  const Index n = config.classes * config.samples_per_class;
  Tensor latent(n, p);
  LabeledDataset ds;
  ds.kind = DataKind::Synthetic;
  ds.classes = config.classes;
  ds.labels.resize(static_cast<std::size_t>(n));
  std::normal_distribution<double> unit(0.0, 1.0);
  Index row = 0;
  for (int c = 0; c < config.classes; ++c) {
    for (Index s = 0; s < config.samples_per_class; ++s, ++row) {
      ds.labels[static_cast<std::size_t>(row)] = c;
      for (Index k = 0; k < config.content_dim; ++k) {
        latent(row, k) = centers(c, k) + config.content_noise * unit(rng);
      }
      for (Index k = 0; k < config.style_dim; ++k) {
        latent(row, config.content_dim + k) = config.style_scale * unit(rng);
      }
    }
  }
  ds.examples = model->mix(latent);
  ds.synthetic = std::move(model);
  return ds;
}

DataSplit split_dataset(const LabeledDataset& data, double test_fraction, std::uint64_t seed) {
  data.validate();
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("split: test fraction must lie in (0, 1)");
  }
  std::mt19937_64 rng(derive_seed(seed, 0x5b117));
  std::vector<char> is_test(static_cast<std::size_t>(data.size()), 0);
  for (int c = 0; c < data.classes; ++c) {
    std::vector<Index> members;
    for (Index i = 0; i < data.size(); ++i) {
      if (data.labels[static_cast<std::size_t>(i)] == c) members.push_back(i);
    }
    std::shuffle(members.begin(), members.end(), rng);
    const auto take = static_cast<std::size_t>(
        std::llround(test_fraction * static_cast<double>(members.size())));
    for (std::size_t k = 0; k < take && k < members.size(); ++k) {
      is_test[static_cast<std::size_t>(members[k])] = 1;
    }
  }
  std::vector<Index> train_rows, test_rows;
  for (Index i = 0; i < data.size(); ++i) {
    (is_test[static_cast<std::size_t>(i)] ? test_rows : train_rows).push_back(i);
  }
  if (train_rows.empty() || test_rows.empty()) throw ConfigError("split: empty partition");
  return {data.subset(train_rows), data.subset(test_rows)};
}

void export_dataset(const LabeledDataset& data, const std::filesystem::path& stem) {
  save_tensor(std::filesystem::path(stem).concat(".pht"), data.examples);
  std::ofstream os(std::filesystem::path(stem).concat(".labels"), std::ios::trunc);
  if (!os) throw FormatError("cannot write labels for " + stem.string());
  for (int l : data.labels) os << l << '\n';
}

}  // namespace phl
