#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "phl/tensor.hpp"

namespace phl {

enum class DataKind { Cifar10, Synthetic };

/// Generative parameters of a synthetic dataset, kept so augmentations can
/// resample the style block through the same mixing.
struct SyntheticModel {
  Index content_dim = 0;
  Index style_dim = 0;
  double style_scale = 0.0;
  Tensor mixing;   // p x p orthogonal; x = mixing * [content; style]
  Tensor centers;  // C x content_dim

  /// Rows of `x` mapped back to (content | style) coordinates.
  Tensor unmix(const Tensor& x) const { return x * mixing; }
  Tensor mix(const Tensor& latent) const { return latent * mixing.transpose(); }
};

struct LabeledDataset {
  Tensor examples;  // N x p
  std::vector<int> labels;
  int classes = 0;
  DataKind kind = DataKind::Synthetic;
  std::shared_ptr<const SyntheticModel> synthetic;

  Index size() const { return examples.rows(); }
  Index dim() const { return examples.cols(); }
  /// Throws unless N > 0, labels in range and all values finite.
  void validate() const;
  LabeledDataset subset(const std::vector<Index>& rows) const;
};

struct SynthConfig {
  Index content_dim = 8;
  Index style_dim = 24;
  int classes = 10;
  Index samples_per_class = 200;
  double content_separation = 4.0;
  double style_scale = 1.0;
  double content_noise = 1.0;  // within-class spread around each center
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr Index kCifarImageBytes = 3072;
inline constexpr Index kCifarRecordBytes = 3073;

LabeledDataset load_cifar10_binary(const std::vector<std::filesystem::path>& paths);

LabeledDataset generate_synthetic(const SynthConfig& config);

struct DataSplit {
  LabeledDataset train;
  LabeledDataset test;
};

/// Stratified split; each class contributes round(test_fraction * n_c) rows
/// to the test set. Row order inside each part follows the source order.
DataSplit split_dataset(const LabeledDataset& data, double test_fraction, std::uint64_t seed);

/// Writes `<stem>.pht` (PHT1 features) and `<stem>.labels` (one label per line).
void export_dataset(const LabeledDataset& data, const std::filesystem::path& stem);

/// Deterministic 64-bit seed mixer (splitmix64 finalizer over the inputs).
std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

}  // namespace phl
