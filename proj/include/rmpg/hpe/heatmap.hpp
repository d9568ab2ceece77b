#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "rmpg/errors.hpp"
#include "rmpg/hpe/skeleton.hpp"
#include "rmpg/tensor.hpp"

namespace rmpg::hpe {

/// Heatmap resolution; image coordinate p maps to heatmap coordinate p / stride.
struct Grid {
  std::size_t width = 32;
  std::size_t height = 32;
  double stride = 2.0;

  Point to_grid(Point image) const { return {image.x / stride, image.y / stride}; }
  std::size_t cells() const { return width * height; }
};

// Kernel sizes relative to the supervised structure, in heatmap pixels.
inline constexpr double body_sigma_factor = 0.25;  // of min(bbox width, height)
inline constexpr double bone_sigma_factor = 0.25;  // of bone length
inline constexpr double joint_sigma = 2.0;

/// Values in [0, 1] on an H x W grid.
class Heatmap {
 public:
  explicit Heatmap(const Grid& grid) : width_(grid.width), height_(grid.height), values_(grid.cells(), 0.0) {}

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  double at(std::size_t x, std::size_t y) const { return values_[y * width_ + x]; }
  double& at(std::size_t x, std::size_t y) { return values_[y * width_ + x]; }
  const std::vector<double>& values() const noexcept { return values_; }

  double max() const { return *std::max_element(values_.begin(), values_.end()); }

  /// Cell of the first maximum in row-major order.
  Point argmax() const {
    const auto it = std::max_element(values_.begin(), values_.end());
    const auto i = static_cast<std::size_t>(it - values_.begin());
    return {static_cast<double>(i % width_), static_cast<double>(i / width_)};
  }

  /// Pointwise maximum with another map.
  void merge_max(const Heatmap& other) {
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] = std::max(values_[i], other.values_[i]);
  }

  friend bool operator==(const Heatmap&, const Heatmap&) = default;

 private:
  std::size_t width_;
  std::size_t height_;
  std::vector<double> values_;
};

/// Unnormalised Gaussian with peak 1 at `center` (heatmap coordinates).
inline Heatmap gaussian(const Grid& grid, Point center, double sigma) {
  if (!(sigma > 0.0)) throw ContractError("Gaussian kernel width must be positive");
  Heatmap h(grid);
  const double denom = 2.0 * sigma * sigma;
  for (std::size_t y = 0; y < grid.height; ++y) {
    for (std::size_t x = 0; x < grid.width; ++x) {
      const double dx = static_cast<double>(x) - center.x, dy = static_cast<double>(y) - center.y;
      h.at(x, y) = std::exp(-(dx * dx + dy * dy) / denom);
    }
  }
  return h;
}

/// One kernel at the bounding-box centre, width proportional to the box.
inline Heatmap body_heatmap(const Skeleton& s, const Grid& grid) {
  if (!(s.bbox.width > 0.0) || !(s.bbox.height > 0.0)) throw ContractError("degenerate bounding box");
  const double sigma = body_sigma_factor * std::min(s.bbox.width, s.bbox.height) / grid.stride;
  return gaussian(grid, grid.to_grid(s.bbox.center), sigma);
}

namespace detail {
inline Heatmap bone_kernel(const Grid& grid, Point a, Point b) {
  const double length = distance(a, b) / grid.stride;
  if (!(length > 0.0)) throw ContractError("zero-length bone");
  return gaussian(grid, grid.to_grid(midpoint(a, b)), bone_sigma_factor * length);
}
}  // namespace detail

/// Limb parts composite the kernels at both bone midpoints by max; the
/// torso is one kernel at the midpoint of head and hip centre.
inline std::array<Heatmap, part_count> part_heatmaps(const Skeleton& s, const Grid& grid) {
  std::array<Heatmap, part_count> out{Heatmap(grid), Heatmap(grid), Heatmap(grid), Heatmap(grid), Heatmap(grid)};
  for (std::size_t k = 0; k < limbs.size(); ++k) {
    const Limb& l = limbs[k];
    out[k] = detail::bone_kernel(grid, s.joints[l.proximal], s.joints[l.middle]);
    out[k].merge_max(detail::bone_kernel(grid, s.joints[l.middle], s.joints[l.distal]));
  }
  out[torso_part] = detail::bone_kernel(grid, s.joints[head], s.hip_center());
  return out;
}

/// Fixed-width kernel per joint; invisible joints get an all-zero map.
inline std::vector<Heatmap> joint_heatmaps(const Skeleton& s, const Grid& grid) {
  std::vector<Heatmap> out;
  out.reserve(joint_count);
  for (std::size_t j = 0; j < joint_count; ++j) {
    out.push_back(s.visible[j] ? gaussian(grid, grid.to_grid(s.joints[j]), joint_sigma) : Heatmap(grid));
  }
  return out;
}

/// Packs maps as the columns of a tokens x maps matrix (token = y*W + x).
template <class T, class Range>
Tensor<T> stack_columns(const Range& maps) {
  const std::size_t n = std::size(maps);
  const std::size_t cells = std::begin(maps)->values().size();
  Tensor<T> out({cells, n});
  std::size_t c = 0;
  for (const auto& m : maps) {
    for (std::size_t i = 0; i < cells; ++i) out[i * n + c] = static_cast<T>(m.values()[i]);
    ++c;
  }
  return out;
}

/// Argmax cell of each column of a tokens x maps prediction.
template <class T>
std::vector<Point> decode_columns(const Tensor<T>& predictions, const Grid& grid) {
  if (predictions.rank() != 2 || predictions.rows() != grid.cells()) {
    throw DimensionError("prediction " + to_string(predictions.shape()) + " does not match the heatmap grid");
  }
  const std::size_t n = predictions.cols();
  std::vector<Point> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < grid.cells(); ++i) {
      if (predictions[i * n + c] > predictions[best * n + c]) best = i;
    }
    out[c] = {static_cast<double>(best % grid.width), static_cast<double>(best / grid.width)};
  }
  return out;
}

/// Fraction of visible joints whose prediction (heatmap coordinates) lies
/// within threshold * bbox diagonal of the ground truth.
class PckCounter {
 public:
  PckCounter(const Grid& grid, double threshold) : grid_(grid), threshold_(threshold) {}

  void add(const std::vector<Point>& predicted, const Skeleton& truth) {
    if (predicted.size() != joint_count) throw DimensionError("expected one prediction per joint");
    const double radius = threshold_ * truth.bbox.diagonal() / grid_.stride;
    for (std::size_t j = 0; j < joint_count; ++j) {
      if (!truth.visible[j]) continue;
      ++total_;
      if (distance(predicted[j], grid_.to_grid(truth.joints[j])) <= radius) ++correct_;
    }
  }

  std::size_t correct() const noexcept { return correct_; }
  std::size_t total() const noexcept { return total_; }

  double value() const {
    if (total_ == 0) throw ContractError("PCK over an empty dataset");
    return static_cast<double>(correct_) / static_cast<double>(total_);
  }

 private:
  Grid grid_;
  double threshold_;
  std::size_t correct_ = 0;
  std::size_t total_ = 0;
};

}  // namespace rmpg::hpe
