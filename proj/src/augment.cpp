#include "phl/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace phl {

namespace {

constexpr Index kPlane = kImageSide * kImageSide;
constexpr Index kImageSize = 3 * kPlane;

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

void clamp_all(RowVector& img) { img = img.unaryExpr([](double v) { return clamp01(v); }); }

RowVector blend(const RowVector& img, const RowVector& other, double factor) {
  RowVector out = factor * img + (1.0 - factor) * other;
  clamp_all(out);
  return out;
}

RowVector gray_plane(const RowVector& img) {
  return 0.299 * img.segment(0, kPlane) + 0.587 * img.segment(kPlane, kPlane) +
         0.114 * img.segment(2 * kPlane, kPlane);
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  v = mx;
  s = mx > 0.0 ? delta / mx : 0.0;
  if (delta <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) {
    h = (g - b) / delta;
  } else if (mx == g) {
    h = 2.0 + (b - r) / delta;
  } else {
    h = 4.0 + (r - g) / delta;
  }
  h /= 6.0;
  h -= std::floor(h);
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double h6 = 6.0 * (h - std::floor(h));
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool coin(Rng& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

}  // namespace

void AugConfig::validate() const {
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("aug: ") + what + " not in [0, 1]");
  };
  prob(flip_prob, "flip_prob");
  prob(jitter_prob, "jitter_prob");
  prob(grayscale_prob, "grayscale_prob");
  if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
    throw ConfigError("aug: crop scale range must satisfy 0 < min <= max <= 1");
  }
  if (!(aspect_min > 0.0 && aspect_min <= aspect_max)) {
    throw ConfigError("aug: aspect range must satisfy 0 < min <= max");
  }
  if (brightness < 0.0 || contrast < 0.0 || saturation < 0.0 || hue < 0.0 || hue > 0.5) {
    throw ConfigError("aug: jitter strengths must be non-negative (hue <= 0.5)");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("aug: noise_sigma must be >= 0");
}

AugConfig AugConfig::identity() {
  AugConfig c;
  c.crop = c.flip = c.jitter = c.grayscale = false;
  c.style_resample = false;
  c.noise_sigma = 0.0;
  return c;
}

Tensor ViewBatch::stacked() const {
  Tensor out(view1.rows() + view2.rows(), view1.cols());
  out << view1, view2;
  return out;
}

namespace image {

RowVector resized_crop(const RowVector& img, Index top, Index left, Index height, Index width) {
  if (img.size() != kImageSize) throw ShapeError("resized_crop: expected a 3x32x32 image");
  if (height < 1 || width < 1 || top < 0 || left < 0 || top + height > kImageSide ||
      left + width > kImageSide) {
    throw ShapeError("resized_crop: crop box outside the image");
  }
  RowVector out(kImageSize);
  const double sy = static_cast<double>(height) / kImageSide;
  const double sx = static_cast<double>(width) / kImageSide;
  for (Index y = 0; y < kImageSide; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(height - 1));
    const Index y0 = static_cast<Index>(std::floor(fy));
    const Index y1 = std::min(y0 + 1, height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (Index x = 0; x < kImageSide; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(width - 1));
      const Index x0 = static_cast<Index>(std::floor(fx));
      const Index x1 = std::min(x0 + 1, width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (Index c = 0; c < 3; ++c) {
        auto at = [&](Index yy, Index xx) {
          return img(c * kPlane + (top + yy) * kImageSide + (left + xx));
        };
        const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                         wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        out(c * kPlane + y * kImageSide + x) = clamp01(v);
      }
    }
  }
  return out;
}

RowVector hflip(const RowVector& img) {
  RowVector out(img.size());
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < kImageSide; ++y) {
      for (Index x = 0; x < kImageSide; ++x) {
        out(c * kPlane + y * kImageSide + x) =
            img(c * kPlane + y * kImageSide + (kImageSide - 1 - x));
      }
    }
  }
  return out;
}

RowVector to_grayscale(const RowVector& img) {
  const RowVector g = gray_plane(img);
  RowVector out(img.size());
  out << g, g, g;
  return out;
}

RowVector adjust_brightness(const RowVector& img, double factor) {
  return blend(img, RowVector::Zero(img.size()), factor);
}

RowVector adjust_contrast(const RowVector& img, double factor) {
  const double mean = gray_plane(img).mean();
  return blend(img, RowVector::Constant(img.size(), mean), factor);
}

RowVector adjust_saturation(const RowVector& img, double factor) {
  return blend(img, to_grayscale(img), factor);
}

RowVector adjust_hue(const RowVector& img, double shift) {
  RowVector out(img.size());
  for (Index k = 0; k < kPlane; ++k) {
    double h, s, v;
    rgb_to_hsv(img(k), img(kPlane + k), img(2 * kPlane + k), h, s, v);
    double r, g, b;
    hsv_to_rgb(h + shift, s, v, r, g, b);
    out(k) = clamp01(r);
    out(kPlane + k) = clamp01(g);
    out(2 * kPlane + k) = clamp01(b);
  }
  return out;
}

}  // namespace image

Augmenter::Augmenter(DataKind kind, AugConfig config,
                     std::shared_ptr<const SyntheticModel> synthetic)
    : kind_(kind), config_(std::move(config)), synthetic_(std::move(synthetic)) {
  config_.validate();
  if (kind_ == DataKind::Synthetic && config_.style_resample && !synthetic_) {
    throw ConfigError("aug: style resampling needs the synthetic generator model");
  }
}

std::pair<RowVector, RowVector> Augmenter::view_pair(const RowVector& example, Rng& rng) const {
  RowVector first = view(example, rng);
  RowVector second = view(example, rng);
  return {std::move(first), std::move(second)};
}

RowVector Augmenter::view(const RowVector& example, Rng& rng) const {
  return kind_ == DataKind::Cifar10 ? image_view(example, rng) : synthetic_view(example, rng);
}

RowVector Augmenter::image_view(const RowVector& example, Rng& rng) const {
  if (example.size() != kImageSize) {
    throw ShapeError("augment: image example has " + std::to_string(example.size()) +
                     " values, expected 3072");
  }
  RowVector img = example;
  if (config_.crop) {
    const double area = static_cast<double>(kPlane);
    Index top = 0, left = 0, height = kImageSide, width = kImageSide;
    for (int attempt = 0; attempt < 10; ++attempt) {
      const double target = area * uniform(rng, config_.crop_scale_min, config_.crop_scale_max);
      const double aspect =
          std::exp(uniform(rng, std::log(config_.aspect_min), std::log(config_.aspect_max)));
      const auto w = static_cast<Index>(std::lround(std::sqrt(target * aspect)));
      const auto h = static_cast<Index>(std::lround(std::sqrt(target / aspect)));
      if (w > 0 && h > 0 && w <= kImageSide && h <= kImageSide) {
        top = std::uniform_int_distribution<Index>(0, kImageSide - h)(rng);
        left = std::uniform_int_distribution<Index>(0, kImageSide - w)(rng);
        height = h;
        width = w;
        break;
      }
    }
    img = image::resized_crop(img, top, left, height, width);
  }
  if (config_.flip && coin(rng, config_.flip_prob)) img = image::hflip(img);
  if (config_.jitter && coin(rng, config_.jitter_prob)) {
    auto factor = [&](double strength) {
      return uniform(rng, std::max(0.0, 1.0 - strength), 1.0 + strength);
    };
    img = image::adjust_brightness(img, factor(config_.brightness));
    img = image::adjust_contrast(img, factor(config_.contrast));
    img = image::adjust_saturation(img, factor(config_.saturation));
    img = image::adjust_hue(img, uniform(rng, -config_.hue, config_.hue));
  }
  if (config_.grayscale && coin(rng, config_.grayscale_prob)) img = image::to_grayscale(img);
  return img;
}

RowVector Augmenter::synthetic_view(const RowVector& example, Rng& rng) const {
  if (synthetic_ && example.size() != synthetic_->mixing.rows()) {
    throw ShapeError("augment: synthetic example has " + std::to_string(example.size()) +
                     " values, expected " + std::to_string(synthetic_->mixing.rows()));
  }
  RowVector x = example;
  std::normal_distribution<double> unit(0.0, 1.0);
  if (config_.style_resample && synthetic_->style_dim > 0) {
    RowVector latent = x * synthetic_->mixing;
    for (Index k = 0; k < synthetic_->style_dim; ++k) {
      latent(synthetic_->content_dim + k) = synthetic_->style_scale * unit(rng);
    }
    x = latent * synthetic_->mixing.transpose();
  }
  if (config_.noise_sigma > 0.0) {
    for (Index k = 0; k < x.size(); ++k) x(k) += config_.noise_sigma * unit(rng);
  }
  return x;
}

MinibatchStream::MinibatchStream(const LabeledDataset& data, Index batch_size, std::uint64_t seed,
                                 Augmenter augmenter)
    : data_(&data), batch_size_(batch_size), seed_(seed), augmenter_(std::move(augmenter)) {
  if (batch_size < 2) {
    throw ConfigError("batch size must be >= 2: InfoNCE needs at least one negative per anchor");
  }
  if (batch_size > data.size()) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds dataset size " +
                      std::to_string(data.size()));
  }
}

std::vector<Index> MinibatchStream::epoch_order(Index epoch) const {
  std::vector<Index> order(static_cast<std::size_t>(data_->size()));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(epoch), 0xba7c4));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<std::pair<Index, Index>> MinibatchStream::partition() const {
  std::vector<std::pair<Index, Index>> parts;
  for (Index offset = 0; offset < data_->size(); offset += batch_size_) {
    const Index len = std::min(batch_size_, data_->size() - offset);
    if (len >= 2) parts.emplace_back(offset, len);
  }
  return parts;
}

ViewBatch MinibatchStream::make_batch(const std::vector<Index>& rows, Index epoch) const {
  ViewBatch batch;
  const auto b = static_cast<Index>(rows.size());
  batch.view1.resize(b, data_->dim());
  batch.view2.resize(b, data_->dim());
  batch.indices = rows;
  batch.rng_state = derive_seed(seed_, static_cast<std::uint64_t>(epoch));
  for (Index i = 0; i < b; ++i) {
    const Index row = rows[static_cast<std::size_t>(i)];
    Rng rng(derive_seed(batch.rng_state, static_cast<std::uint64_t>(row), 0xa06));
    auto [first, second] = augmenter_.view_pair(data_->examples.row(row), rng);
    batch.view1.row(i) = first;
    batch.view2.row(i) = second;
  }
  return batch;
}

std::vector<ViewBatch> MinibatchStream::epoch(Index epoch) const {
  const auto order = epoch_order(epoch);
  std::vector<ViewBatch> out;
  for (const auto& [offset, len] : partition()) {
    std::vector<Index> rows(order.begin() + offset, order.begin() + offset + len);
    out.push_back(make_batch(rows, epoch));
  }
  return out;
}

}  // namespace phl
