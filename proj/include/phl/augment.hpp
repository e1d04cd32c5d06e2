#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "phl/data.hpp"

namespace phl {

using Rng = std::mt19937_64;

struct AugConfig {
  // Image chain (3 x 32 x 32, planar RGB in [0, 1]).
  bool crop = true;
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double aspect_min = 0.75;
  double aspect_max = 4.0 / 3.0;
  bool flip = true;
  double flip_prob = 0.5;
  bool jitter = true;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;
  bool grayscale = true;
  double grayscale_prob = 0.2;

  // Synthetic chain.
  bool style_resample = true;
  double noise_sigma = 0.0;

  void validate() const;
  /// Every transform disabled: views equal the source example.
  static AugConfig identity();
};

struct ViewBatch {
  Tensor view1;  // B x p
  Tensor view2;  // B x p
  std::vector<Index> indices;
  std::uint64_t rng_state = 0;  // seed the per-example generators derive from

  Index size() const { return view1.rows(); }
  /// [view1; view2], the layout the loss expects.
  Tensor stacked() const;
};

inline constexpr Index kImageSide = 32;

/// Applies two independent draws of the transform chain matching the
/// dataset kind. Throws ShapeError on dimension mismatch.
class Augmenter {
 public:
  Augmenter(DataKind kind, AugConfig config,
            std::shared_ptr<const SyntheticModel> synthetic = nullptr);

  std::pair<RowVector, RowVector> view_pair(const RowVector& example, Rng& rng) const;
  RowVector view(const RowVector& example, Rng& rng) const;

  const AugConfig& config() const { return config_; }

 private:
  RowVector image_view(const RowVector& example, Rng& rng) const;
  RowVector synthetic_view(const RowVector& example, Rng& rng) const;

  DataKind kind_;
  AugConfig config_;
  std::shared_ptr<const SyntheticModel> synthetic_;
};

// Individual image transforms on planar RGB rows, exposed for testing.
namespace image {
RowVector resized_crop(const RowVector& img, Index top, Index left, Index height, Index width);
RowVector hflip(const RowVector& img);
RowVector to_grayscale(const RowVector& img);
RowVector adjust_brightness(const RowVector& img, double factor);
RowVector adjust_contrast(const RowVector& img, double factor);
RowVector adjust_saturation(const RowVector& img, double factor);
RowVector adjust_hue(const RowVector& img, double shift);
}  // namespace image

/// Seeded epoch permutation partitioned into batches of size B; a final
/// batch with fewer than two examples is dropped.
class MinibatchStream {
 public:
  MinibatchStream(const LabeledDataset& data, Index batch_size, std::uint64_t seed,
                  Augmenter augmenter);

  std::vector<Index> epoch_order(Index epoch) const;
  /// Batch boundaries for one epoch as (offset, length) pairs.
  std::vector<std::pair<Index, Index>> partition() const;
  std::vector<ViewBatch> epoch(Index epoch) const;
  ViewBatch make_batch(const std::vector<Index>& rows, Index epoch) const;

  Index batch_size() const { return batch_size_; }

 private:
  const LabeledDataset* data_;
  Index batch_size_;
  std::uint64_t seed_;
  Augmenter augmenter_;
};

}  // namespace phl
