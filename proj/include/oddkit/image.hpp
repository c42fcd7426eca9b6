#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "oddkit/common.hpp"
#include "oddkit/tensor.hpp"

namespace oddkit {

// Float images are Tensor<float> in [H,W,C] layout with values in [0,1].
// Masked images carry a support plane; resampling keeps exact zeros outside
// support by interpolating premultiplied values and dividing the weight back
// out, then thresholding the interpolated support at 0.5.

struct MaskedImage {
  Tensor<float> pixels;   // [H,W,C]
  Tensor<float> support;  // [H,W], 0 or 1

  std::int64_t height() const { return pixels.shape[0]; }
  std::int64_t width() const { return pixels.shape[1]; }
  std::int64_t channels() const { return pixels.shape[2]; }
};

/// Row-major affine map: dst -> src sampling positions are computed from the
/// inverse, stored here directly as (sx, sy) = A*(dx, dy) + b.
struct Affine {
  double a00 = 1, a01 = 0, a10 = 0, a11 = 1;
  double bx = 0, by = 0;

  static Affine identity() { return {}; }
  bool is_identity() const {
    return a00 == 1 && a01 == 0 && a10 == 0 && a11 == 1 && bx == 0 && by == 0;
  }
  std::pair<double, double> apply(double x, double y) const {
    return {a00 * x + a01 * y + bx, a10 * x + a11 * y + by};
  }
  /// this ∘ other (apply other first).
  Affine compose(const Affine& other) const {
    Affine r;
    r.a00 = a00 * other.a00 + a01 * other.a10;
    r.a01 = a00 * other.a01 + a01 * other.a11;
    r.a10 = a10 * other.a00 + a11 * other.a10;
    r.a11 = a10 * other.a01 + a11 * other.a11;
    auto [x, y] = apply(other.bx, other.by);
    r.bx = x;
    r.by = y;
    return r;
  }
  /// Rotation by `rad` about (cx, cy).
  static Affine rotation(double rad, double cx, double cy) {
    double c = std::cos(rad), s = std::sin(rad);
    Affine r{c, -s, s, c, 0, 0};
    r.bx = cx - c * cx + s * cy;
    r.by = cy - s * cx - c * cy;
    return r;
  }
  static Affine translation(double tx, double ty) { return {1, 0, 0, 1, tx, ty}; }
  /// Uniform scale about (cx, cy), optionally mirrored in x.
  static Affine scaling(double sx, double sy, double cx, double cy) {
    Affine r{sx, 0, 0, sy, 0, 0};
    r.bx = cx - sx * cx;
    r.by = cy - sy * cy;
    return r;
  }
  Affine inverse() const {
    double det = a00 * a11 - a01 * a10;
    if (det == 0) throw NumericError("affine map is singular");
    Affine r;
    r.a00 = a11 / det;
    r.a01 = -a01 / det;
    r.a10 = -a10 / det;
    r.a11 = a00 / det;
    r.bx = -(r.a00 * bx + r.a01 * by);
    r.by = -(r.a10 * bx + r.a11 * by);
    return r;
  }
};

namespace detail {

struct BilinearTaps {
  std::int64_t x0, y0;
  double fx, fy;  // fractional parts
};

inline BilinearTaps taps_for(double sx, double sy) {
  // continuous position (px + 0.5) is the center of pixel px
  double gx = sx - 0.5, gy = sy - 0.5;
  double fx0 = std::floor(gx), fy0 = std::floor(gy);
  return {static_cast<std::int64_t>(fx0), static_cast<std::int64_t>(fy0), gx - fx0, gy - fy0};
}

}  // namespace detail

/// Bilinear warp of a masked image through `dst_to_src`. Samples with support
/// premultiplication so colors never bleed in from the zero background, and
/// the output support stays exactly 0/1.
inline MaskedImage warp_masked(const MaskedImage& src, const Affine& dst_to_src,
                               std::int64_t out_h, std::int64_t out_w) {
  const std::int64_t h = src.height(), w = src.width(), c = src.channels();
  MaskedImage out{Tensor<float>({out_h, out_w, c}), Tensor<float>({out_h, out_w})};
  if (dst_to_src.is_identity() && out_h == h && out_w == w) {
    out.pixels = src.pixels;
    out.support = src.support;
    return out;
  }
  std::vector<double> acc(static_cast<std::size_t>(c));
  for (std::int64_t y = 0; y < out_h; ++y) {
    for (std::int64_t x = 0; x < out_w; ++x) {
      auto [sx, sy] = dst_to_src.apply(x + 0.5, y + 0.5);
      auto t = detail::taps_for(sx, sy);
      double wsum = 0.0;
      std::fill(acc.begin(), acc.end(), 0.0);
      const double wx[2] = {1.0 - t.fx, t.fx};
      const double wy[2] = {1.0 - t.fy, t.fy};
      for (int dy = 0; dy < 2; ++dy) {
        std::int64_t py = t.y0 + dy;
        if (py < 0 || py >= h) continue;
        for (int dx = 0; dx < 2; ++dx) {
          std::int64_t px = t.x0 + dx;
          if (px < 0 || px >= w) continue;
          double weight = wx[dx] * wy[dy];
          if (weight == 0.0) continue;
          double sup = src.support[py * w + px];
          if (sup == 0.0f) continue;
          wsum += weight * sup;
          const float* p = src.pixels.data() + (py * w + px) * c;
          for (std::int64_t ch = 0; ch < c; ++ch) acc[ch] += weight * sup * p[ch];
        }
      }
      float* dst = out.pixels.data() + (y * out_w + x) * c;
      if (wsum >= 0.5) {
        out.support[y * out_w + x] = 1.0f;
        for (std::int64_t ch = 0; ch < c; ++ch)
          dst[ch] = std::clamp(static_cast<float>(acc[ch] / wsum), 0.0f, 1.0f);
      }
      // else: support 0, pixels stay exactly 0
    }
  }
  return out;
}

/// Resize to size×size via the masked warp.
inline MaskedImage resize_masked(const MaskedImage& src, std::int64_t size) {
  double sx = static_cast<double>(src.width()) / size;
  double sy = static_cast<double>(src.height()) / size;
  Affine m{sx, 0, 0, sy, 0, 0};
  return warp_masked(src, m, size, size);
}

/// Exact horizontal mirror (no resampling).
inline MaskedImage mirror_horizontal(const MaskedImage& src) {
  const std::int64_t h = src.height(), w = src.width(), c = src.channels();
  MaskedImage out{Tensor<float>({h, w, c}), Tensor<float>({h, w})};
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      std::int64_t mx = w - 1 - x;
      out.support[y * w + x] = src.support[y * w + mx];
      for (std::int64_t ch = 0; ch < c; ++ch)
        out.pixels[(y * w + x) * c + ch] = src.pixels[(y * w + mx) * c + ch];
    }
  return out;
}

/// Draws tiles side by side on black, row-major, for the score sheets.
inline Tensor<float> contact_sheet(const std::vector<Tensor<float>>& tiles, std::int64_t columns,
                                   std::int64_t gap = 2) {
  if (tiles.empty()) throw ValidationError("contact_sheet: no tiles");
  const std::int64_t th = tiles[0].shape[0], tw = tiles[0].shape[1], c = tiles[0].shape[2];
  for (const auto& t : tiles)
    if (t.shape != tiles[0].shape)
      throw ShapeError("contact_sheet: mixed tile shapes " + shape_str(t.shape) + " vs " +
                       shape_str(tiles[0].shape));
  columns = std::max<std::int64_t>(1, std::min<std::int64_t>(columns, tiles.size()));
  std::int64_t rows = (static_cast<std::int64_t>(tiles.size()) + columns - 1) / columns;
  std::int64_t H = rows * th + (rows + 1) * gap;
  std::int64_t W = columns * tw + (columns + 1) * gap;
  Tensor<float> sheet({H, W, c});
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    std::int64_t r = static_cast<std::int64_t>(i) / columns;
    std::int64_t col = static_cast<std::int64_t>(i) % columns;
    std::int64_t oy = gap + r * (th + gap);
    std::int64_t ox = gap + col * (tw + gap);
    for (std::int64_t y = 0; y < th; ++y)
      for (std::int64_t x = 0; x < tw; ++x)
        for (std::int64_t ch = 0; ch < c; ++ch)
          sheet[((oy + y) * W + ox + x) * c + ch] = tiles[i][(y * tw + x) * c + ch];
  }
  return sheet;
}

}  // namespace oddkit
