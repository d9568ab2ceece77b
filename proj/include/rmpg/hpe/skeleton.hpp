#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "rmpg/random.hpp"
#include "rmpg/tensor.hpp"

namespace rmpg::hpe {

inline constexpr std::size_t joint_count = 13;
inline constexpr std::size_t part_count = 5;

enum Joint : std::size_t {
  head,
  left_hip,
  left_knee,
  left_ankle,
  right_hip,
  right_knee,
  right_ankle,
  left_shoulder,
  left_elbow,
  left_wrist,
  right_shoulder,
  right_elbow,
  right_wrist,
};

inline constexpr std::array<std::string_view, joint_count> joint_names{
    "head",     "left_hip",      "left_knee",  "left_ankle",     "right_hip",   "right_knee", "right_ankle",
    "left_shoulder", "left_elbow", "left_wrist", "right_shoulder", "right_elbow", "right_wrist"};

struct Limb {
  Joint proximal;
  Joint middle;
  Joint distal;
};

// Parts 0..3 are limbs: left leg, right leg, left arm, right arm. Part 4
// is the torso.
inline constexpr std::array<Limb, 4> limbs{{{left_hip, left_knee, left_ankle},
                                            {right_hip, right_knee, right_ankle},
                                            {left_shoulder, left_elbow, left_wrist},
                                            {right_shoulder, right_elbow, right_wrist}}};
inline constexpr std::size_t torso_part = 4;
inline constexpr std::array<std::string_view, part_count> part_names{"left_leg", "right_leg", "left_arm", "right_arm",
                                                                     "torso"};

/// Joints supervised through part k, in joint-index order.
inline std::vector<Joint> part_joints(std::size_t part) {
  if (part == torso_part) return {head};
  const Limb& l = limbs.at(part);
  return {l.proximal, l.middle, l.distal};
}

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }
inline Point midpoint(Point a, Point b) { return {(a.x + b.x) / 2.0, (a.y + b.y) / 2.0}; }

struct BBox {
  Point center;
  double width = 0.0;
  double height = 0.0;

  bool contains(Point p) const {
    return std::abs(p.x - center.x) <= width / 2.0 && std::abs(p.y - center.y) <= height / 2.0;
  }
  double diagonal() const { return std::hypot(width, height); }
  friend bool operator==(const BBox&, const BBox&) = default;
};

/// 2D pose in image pixels.
struct Skeleton {
  std::array<Point, joint_count> joints{};
  std::array<bool, joint_count> visible{};
  BBox bbox;

  Point hip_center() const { return midpoint(joints[left_hip], joints[right_hip]); }
  friend bool operator==(const Skeleton&, const Skeleton&) = default;
};

/// Kinematic prior. Limb directions are angles from straight down, positive
/// away from the body midline; every `*_range` is a symmetric uniform
/// perturbation around the base value.
struct PosePrior {
  double image_size = 64.0;
  Point hip_anchor{32.0, 38.0};
  double anchor_range = 3.0;
  double scale_range = 0.1;

  double torso_length = 15.0;
  double torso_tilt_range = 0.25;
  double shoulder_fraction = 0.75;  // shoulder line position from hips to head
  double hip_half_width = 4.0;
  double shoulder_half_width = 5.0;

  double thigh = 9.0;
  double shin = 8.0;
  double upper_arm = 7.0;
  double forearm = 6.0;

  double leg_angle = 0.15;
  double leg_range = 0.35;
  double knee_range = 0.4;
  double arm_angle = 0.5;
  double arm_range = 1.0;
  double elbow_range = 0.8;

  double occlusion_probability = 0.0;
  double bbox_margin = 2.0;

  /// Prior with every perturbation range set to zero.
  static PosePrior rest() {
    PosePrior p;
    p.anchor_range = p.scale_range = p.torso_tilt_range = 0.0;
    p.leg_range = p.knee_range = p.arm_range = p.elbow_range = 0.0;
    p.occlusion_probability = 0.0;
    return p;
  }

  /// Same prior with every length rescaled for a square image of `size`.
  PosePrior resized(double size) const {
    PosePrior p = *this;
    const double f = size / image_size;
    p.image_size = size;
    p.hip_anchor = {hip_anchor.x * f, hip_anchor.y * f};
    for (double* v : {&p.anchor_range, &p.torso_length, &p.hip_half_width, &p.shoulder_half_width, &p.thigh, &p.shin,
                      &p.upper_arm, &p.forearm, &p.bbox_margin}) {
      *v *= f;
    }
    return p;
  }
};

inline BBox joint_bbox(const std::array<Point, joint_count>& joints, double margin) {
  double x0 = joints[0].x, x1 = joints[0].x, y0 = joints[0].y, y1 = joints[0].y;
  for (const auto& p : joints) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  return {{(x0 + x1) / 2.0, (y0 + y1) / 2.0}, x1 - x0 + 2.0 * margin, y1 - y0 + 2.0 * margin};
}

/// Deterministic per seed.
inline Skeleton sample_pose(std::uint64_t seed, const PosePrior& prior = {}) {
  Rng rng(seed);
  auto jitter = [&rng](double range) { return range > 0.0 ? rng.uniform(-range, range) : 0.0; };
  const double scale = 1.0 + jitter(prior.scale_range);
  const Point hips{prior.hip_anchor.x + jitter(prior.anchor_range), prior.hip_anchor.y + jitter(prior.anchor_range)};
  const double tilt = jitter(prior.torso_tilt_range);
  // unit vector from the hips towards the head
  const Point up{std::sin(tilt), -std::cos(tilt)};
  const Point across{-up.y, up.x};  // towards image-right

  Skeleton s;
  auto along = [](Point o, Point d, double t) { return Point{o.x + d.x * t, o.y + d.y * t}; };
  s.joints[head] = along(hips, up, prior.torso_length * scale);
  const Point shoulders = along(hips, up, prior.torso_length * prior.shoulder_fraction * scale);
  s.joints[left_hip] = along(hips, across, -prior.hip_half_width * scale);
  s.joints[right_hip] = along(hips, across, prior.hip_half_width * scale);
  s.joints[left_shoulder] = along(shoulders, across, -prior.shoulder_half_width * scale);
  s.joints[right_shoulder] = along(shoulders, across, prior.shoulder_half_width * scale);

  auto grow = [&](const Limb& limb, double side, double base, double range, double bend_range, double upper,
                  double lower) {
    const double a1 = base + jitter(range);
    const double a2 = a1 + jitter(bend_range);
    const Point d1{side * std::sin(a1), std::cos(a1)};
    const Point d2{side * std::sin(a2), std::cos(a2)};
    s.joints[limb.middle] = along(s.joints[limb.proximal], d1, upper * scale);
    s.joints[limb.distal] = along(s.joints[limb.middle], d2, lower * scale);
  };
  grow(limbs[0], -1.0, prior.leg_angle, prior.leg_range, prior.knee_range, prior.thigh, prior.shin);
  grow(limbs[1], 1.0, prior.leg_angle, prior.leg_range, prior.knee_range, prior.thigh, prior.shin);
  grow(limbs[2], -1.0, prior.arm_angle, prior.arm_range, prior.elbow_range, prior.upper_arm, prior.forearm);
  grow(limbs[3], 1.0, prior.arm_angle, prior.arm_range, prior.elbow_range, prior.upper_arm, prior.forearm);

  for (std::size_t j = 0; j < joint_count; ++j) {
    s.visible[j] = prior.occlusion_probability <= 0.0 || rng.unit() >= prior.occlusion_probability;
  }
  s.bbox = joint_bbox(s.joints, prior.bbox_margin);
  return s;
}

/// Single-channel render as a (size*size) x 1 token matrix: every bone is
/// a soft line whose brightness identifies its part, the head a soft disc.
template <class T>
Tensor<T> render(const Skeleton& s, std::size_t size) {
  struct Segment {
    Point a, b;
    double intensity;
  };
  std::vector<Segment> segs;
  const std::array<double, 4> limb_intensity{0.45, 0.6, 0.75, 0.9};
  for (std::size_t k = 0; k < limbs.size(); ++k) {
    segs.push_back({s.joints[limbs[k].proximal], s.joints[limbs[k].middle], limb_intensity[k]});
    segs.push_back({s.joints[limbs[k].middle], s.joints[limbs[k].distal], limb_intensity[k]});
  }
  segs.push_back({s.joints[head], s.hip_center(), 0.3});
  segs.push_back({s.joints[left_hip], s.joints[right_hip], 0.3});
  segs.push_back({s.joints[left_shoulder], s.joints[right_shoulder], 0.3});

  constexpr double line_sigma = 0.8;
  constexpr double head_radius = 2.5;
  Tensor<T> img({size * size, 1});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const Point p{static_cast<double>(x), static_cast<double>(y)};
      double v = 0.0;
      for (const auto& sg : segs) {
        const double dx = sg.b.x - sg.a.x, dy = sg.b.y - sg.a.y;
        const double len2 = dx * dx + dy * dy;
        double t = len2 > 0.0 ? ((p.x - sg.a.x) * dx + (p.y - sg.a.y) * dy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double d = distance(p, {sg.a.x + t * dx, sg.a.y + t * dy});
        v = std::max(v, sg.intensity * std::exp(-d * d / (2.0 * line_sigma * line_sigma)));
      }
      const double dh = std::max(0.0, distance(p, s.joints[head]) - head_radius);
      v = std::max(v, std::exp(-dh * dh / (2.0 * line_sigma * line_sigma)));
      img[y * size + x] = static_cast<T>(v);
    }
  }
  return img;
}

}  // namespace rmpg::hpe
