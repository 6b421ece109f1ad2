#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "ilora/error.hpp"

namespace ilora {

// Row-major binary mask; origin top-left, x = column, y = row.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}
  BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> b)
      : height(h), width(w), bits(std::move(b)) {
    if (bits.size() != height * width) {
      throw ValidationError("BinaryMask: " + std::to_string(bits.size()) + " bits for " +
                            std::to_string(height) + "x" + std::to_string(width));
    }
  }

  bool at(std::size_t x, std::size_t y) const noexcept { return bits[y * width + x] != 0; }
  void set(std::size_t x, std::size_t y, bool v = true) noexcept { bits[y * width + x] = v; }

  std::size_t foreground_count() const noexcept {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(),
                                                  [](std::uint8_t b) { return b != 0; }));
  }
};

struct Point {
  std::int64_t x = 0;
  std::int64_t y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

// Inclusive pixel coordinates [x_left, y_top, x_right, y_bottom].
struct BoundingBox {
  std::int64_t x_left = 0;
  std::int64_t y_top = 0;
  std::int64_t x_right = 0;
  std::int64_t y_bottom = 0;
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;

  bool contains(const Point& p) const noexcept {
    return p.x >= x_left && p.x <= x_right && p.y >= y_top && p.y <= y_bottom;
  }
};

struct Circle {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;
};

struct SupervisionTarget {
  BoundingBox bbox;
  std::vector<Point> points;
  std::vector<Circle> circles;  // circle behind each point, padding included
  bool degenerate = false;
};

inline BoundingBox bounding_box(const BinaryMask& mask) {
  BoundingBox b{std::numeric_limits<std::int64_t>::max(), std::numeric_limits<std::int64_t>::max(),
                -1, -1};
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      const auto xi = static_cast<std::int64_t>(x), yi = static_cast<std::int64_t>(y);
      b.x_left = std::min(b.x_left, xi);
      b.x_right = std::max(b.x_right, xi);
      b.y_top = std::min(b.y_top, yi);
      b.y_bottom = std::max(b.y_bottom, yi);
    }
  }
  if (b.x_right < 0) throw ValidationError("bounding_box: mask has no foreground pixels");
  return b;
}

namespace detail {

// Lower envelope of parabolas (q - p)^2 + f(p) over integer sites p
// (Felzenszwalb & Huttenlocher). Sites with f < 0 are skipped.
inline void lower_envelope_1d(const std::vector<std::int64_t>& f, std::vector<std::int64_t>& out) {
  const std::size_t m = f.size();
  std::vector<std::size_t> v(m);
  std::vector<double> z(m + 1);
  std::size_t k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  auto intersect = [&](std::size_t q, std::size_t p) {
    const double qq = static_cast<double>(q), pp = static_cast<double>(p);
    return (static_cast<double>(f[q] - f[p]) + qq * qq - pp * pp) / (2.0 * qq - 2.0 * pp);
  };
  for (std::size_t q = 1; q < m; ++q) {
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  out.assign(m, 0);
  k = 0;
  for (std::size_t q = 0; q < m; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const auto dq = static_cast<std::int64_t>(q) - static_cast<std::int64_t>(v[k]);
    out[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

// Exact squared Euclidean distance from every pixel to the nearest background
// pixel, where everything outside the image counts as background. Background
// pixels map to 0. Separable: column distances, then a row-wise lower envelope.
inline std::vector<std::int64_t> squared_distance_transform(const BinaryMask& mask) {
  const std::size_t H = mask.height, W = mask.width;
  std::vector<std::int64_t> col(H * W, 0);
  for (std::size_t x = 0; x < W; ++x) {
    std::int64_t last_bg = -1;
    for (std::size_t y = 0; y < H; ++y) {
      if (!mask.at(x, y)) last_bg = static_cast<std::int64_t>(y);
      col[y * W + x] = static_cast<std::int64_t>(y) - last_bg;
    }
    auto next_bg = static_cast<std::int64_t>(H);
    for (std::size_t y = H; y-- > 0;) {
      if (!mask.at(x, y)) next_bg = static_cast<std::int64_t>(y);
      col[y * W + x] = std::min(col[y * W + x], next_bg - static_cast<std::int64_t>(y));
    }
  }

  std::vector<std::int64_t> out(H * W, 0);
  // Sites -1 and W are the out-of-image background columns.
  std::vector<std::int64_t> f(W + 2), env;
  for (std::size_t y = 0; y < H; ++y) {
    f[0] = 0;
    f[W + 1] = 0;
    for (std::size_t x = 0; x < W; ++x) f[x + 1] = col[y * W + x] * col[y * W + x];
    detail::lower_envelope_1d(f, env);
    for (std::size_t x = 0; x < W; ++x) out[y * W + x] = env[x + 1];
  }
  return out;
}

// Per-pixel inscribed-circle radius: the Euclidean distance to the nearest background.
inline std::vector<double> distance_transform(const BinaryMask& mask) {
  const auto sq = squared_distance_transform(mask);
  std::vector<double> out(sq.size());
  std::transform(sq.begin(), sq.end(), out.begin(),
                 [](std::int64_t v) { return std::sqrt(static_cast<double>(v)); });
  return out;
}

// Intersection over union of two disks via the analytic lens area.
inline double circle_iou(const Circle& a, const Circle& b) {
  if (a.radius < 0.0 || b.radius < 0.0) throw ValidationError("circle_iou: negative radius");
  const double ra = a.radius, rb = b.radius;
  const double area_a = std::numbers::pi * ra * ra;
  const double area_b = std::numbers::pi * rb * rb;
  if (area_a + area_b == 0.0) return 0.0;
  const double d = std::hypot(a.cx - b.cx, a.cy - b.cy);

  double inter = 0.0;
  if (d >= ra + rb) {
    inter = 0.0;
  } else if (d <= std::abs(ra - rb)) {
    inter = std::min(area_a, area_b);
  } else {
    auto clamp1 = [](double v) { return std::clamp(v, -1.0, 1.0); };
    const double ta = std::acos(clamp1((d * d + ra * ra - rb * rb) / (2.0 * d * ra)));
    const double tb = std::acos(clamp1((d * d + rb * rb - ra * ra) / (2.0 * d * rb)));
    const double k = (-d + ra + rb) * (d + ra - rb) * (d - ra + rb) * (d + ra + rb);
    inter = ra * ra * ta + rb * rb * tb - 0.5 * std::sqrt(std::max(0.0, k));
  }
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

// Bounding box plus the centres of the k largest inscribed circles, chosen
// greedily by descending radius (ties: smaller y, then smaller x) and skipping
// any circle whose IoU with an accepted one exceeds iou_cap. Short selections
// are padded with the first centre and flagged degenerate.
inline SupervisionTarget sample_points(const BinaryMask& mask, std::size_t k = 3,
                                       double iou_cap = 0.3) {
  if (k == 0) throw ValidationError("sample_points: k must be >= 1");
  if (!(iou_cap >= 0.0 && iou_cap <= 1.0)) {
    throw ValidationError("sample_points: iou_cap must lie in [0, 1]");
  }
  SupervisionTarget target;
  target.bbox = bounding_box(mask);

  const auto radius = distance_transform(mask);
  std::vector<std::size_t> order;
  order.reserve(mask.foreground_count());
  for (std::size_t i = 0; i < radius.size(); ++i)
    if (mask.bits[i]) order.push_back(i);
  // Row-major index order is (y, x) lexicographic order.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return radius[a] > radius[b]; });

  for (std::size_t idx : order) {
    const Circle c{static_cast<double>(idx % mask.width), static_cast<double>(idx / mask.width),
                   radius[idx]};
    const bool ok = std::all_of(target.circles.begin(), target.circles.end(),
                                [&](const Circle& other) { return circle_iou(c, other) <= iou_cap; });
    if (!ok) continue;
    target.circles.push_back(c);
    target.points.push_back({static_cast<std::int64_t>(idx % mask.width),
                             static_cast<std::int64_t>(idx / mask.width)});
    if (target.points.size() == k) break;
  }
  while (target.points.size() < k) {
    target.degenerate = true;
    target.points.push_back(target.points.front());
    target.circles.push_back(target.circles.front());
  }
  return target;
}

}  // namespace ilora
