#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "oddkit/common.hpp"

namespace oddkit {

// COCO-style annotation parsing and mask decoding. Only the pieces the patch
// pipeline needs: images / annotations / categories arrays, polygon and
// integer-array RLE segmentations.

struct MaskBitmap {
  std::int64_t height = 0, width = 0;
  std::vector<std::uint8_t> bits;  // row-major, 0/1

  MaskBitmap() = default;
  MaskBitmap(std::int64_t h, std::int64_t w)
      : height(h), width(w), bits(static_cast<std::size_t>(h * w), 0) {}

  std::uint8_t at(std::int64_t y, std::int64_t x) const { return bits[y * width + x]; }
  void set(std::int64_t y, std::int64_t x) { bits[y * width + x] = 1; }
  std::int64_t area() const {
    std::int64_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }
  bool operator==(const MaskBitmap& o) const {
    return height == o.height && width == o.width && bits == o.bits;
  }
};

/// One ring is a flat [x0,y0,x1,y1,...] list.
using PolygonRing = std::vector<double>;

struct ImageInfo {
  std::int64_t id = 0;
  std::int64_t width = 0, height = 0;
  std::string file_name;
};

struct AnnotationRecord {
  std::int64_t annotation_id = 0;
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  std::vector<PolygonRing> polygons;
  std::vector<std::int64_t> rle_counts;  // set iff polygons empty
  std::int64_t rle_height = 0, rle_width = 0;
  std::array<double, 4> bbox{};  // x, y, w, h
  bool iscrowd = false;

  bool has_rle() const { return polygons.empty(); }
};

struct CocoDataset {
  std::vector<ImageInfo> images;
  std::vector<AnnotationRecord> annotations;
  std::map<std::int64_t, std::string> category_names;

  const ImageInfo& image(std::int64_t id) const {
    for (const auto& im : images)
      if (im.id == id) return im;
    throw ValidationError("unknown image id " + std::to_string(id));
  }
};

/// Parses a COCO annotation document. Annotations referencing images absent
/// from the images array are a hard error, as are malformed segmentations.
inline CocoDataset parse_annotations(const std::string& bytes) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("annotation document: ") + e.what(), e.byte);
  }
  if (!doc.is_object() || !doc.contains("images") || !doc.contains("annotations"))
    throw ParseError("annotation document lacks images/annotations arrays", 0);

  CocoDataset ds;
  std::map<std::int64_t, std::size_t> image_index;
  for (const auto& j : doc["images"]) {
    ImageInfo im;
    im.id = j.at("id").get<std::int64_t>();
    im.width = j.value("width", std::int64_t(0));
    im.height = j.value("height", std::int64_t(0));
    im.file_name = j.value("file_name", std::string());
    image_index[im.id] = ds.images.size();
    ds.images.push_back(std::move(im));
  }
  if (doc.contains("categories"))
    for (const auto& j : doc["categories"])
      ds.category_names[j.at("id").get<std::int64_t>()] = j.value("name", std::string());

  for (const auto& j : doc["annotations"]) {
    AnnotationRecord r;
    r.annotation_id = j.at("id").get<std::int64_t>();
    r.image_id = j.at("image_id").get<std::int64_t>();
    r.category_id = j.at("category_id").get<std::int64_t>();
    r.iscrowd = j.value("iscrowd", 0) != 0;
    if (!image_index.count(r.image_id))
      throw ValidationError("annotation " + std::to_string(r.annotation_id) +
                            " references missing image id " + std::to_string(r.image_id));
    const auto& bb = j.at("bbox");
    for (int i = 0; i < 4; ++i) r.bbox[i] = bb.at(i).get<double>();
    if (!(r.bbox[2] > 0.0) || !(r.bbox[3] > 0.0))
      throw ValidationError("annotation " + std::to_string(r.annotation_id) +
                            " has empty bbox");

    const auto& seg = j.at("segmentation");
    if (seg.is_object()) {
      const auto& counts = seg.at("counts");
      if (counts.is_string())
        throw ValidationError("annotation " + std::to_string(r.annotation_id) +
                              " uses compressed RLE counts; only integer-array RLE is supported");
      r.rle_height = seg.at("size").at(0).get<std::int64_t>();
      r.rle_width = seg.at("size").at(1).get<std::int64_t>();
      std::int64_t total = 0;
      for (const auto& c : counts) {
        r.rle_counts.push_back(c.get<std::int64_t>());
        total += r.rle_counts.back();
      }
      if (total != r.rle_height * r.rle_width)
        throw ValidationError("annotation " + std::to_string(r.annotation_id) +
                              " RLE counts sum to " + std::to_string(total) + ", expected " +
                              std::to_string(r.rle_height * r.rle_width));
    } else if (seg.is_array()) {
      for (const auto& ring : seg) {
        PolygonRing pr;
        for (const auto& v : ring) pr.push_back(v.get<double>());
        if (pr.size() < 6 || pr.size() % 2 != 0)
          throw ValidationError("annotation " + std::to_string(r.annotation_id) +
                                " has a degenerate polygon ring of " +
                                std::to_string(pr.size()) + " coordinates");
        r.polygons.push_back(std::move(pr));
      }
      if (r.polygons.empty())
        throw ValidationError("annotation " + std::to_string(r.annotation_id) +
                              " has an empty segmentation");
    } else {
      throw ValidationError("annotation " + std::to_string(r.annotation_id) +
                            " has an unrecognized segmentation payload");
    }
    ds.annotations.push_back(std::move(r));
  }
  return ds;
}

/// Even-odd scanline rasterization at pixel centers (x+0.5, y+0.5); rings are
/// OR-combined.
inline MaskBitmap rasterize_polygon(const std::vector<PolygonRing>& rings, std::int64_t height,
                                    std::int64_t width) {
  if (rings.empty()) throw ValidationError("rasterize: no polygon rings");
  for (const auto& r : rings)
    if (r.size() < 6 || r.size() % 2 != 0)
      throw ValidationError("rasterize: degenerate ring of " + std::to_string(r.size()) +
                            " coordinates");
  MaskBitmap m(height, width);
  std::vector<double> xs;
  for (const auto& ring : rings) {
    const std::size_t n = ring.size() / 2;
    for (std::int64_t py = 0; py < height; ++py) {
      const double y = py + 0.5;
      xs.clear();
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t j = (i + 1) % n;
        double y1 = ring[2 * i + 1], y2 = ring[2 * j + 1];
        if ((y1 <= y) == (y2 <= y)) continue;  // half-open rule, no double-count at vertices
        double x1 = ring[2 * i], x2 = ring[2 * j];
        xs.push_back(x1 + (y - y1) * (x2 - x1) / (y2 - y1));
      }
      std::sort(xs.begin(), xs.end());
      for (std::size_t s = 0; s + 1 < xs.size(); s += 2) {
        // centers in [xs[s], xs[s+1]) are inside
        std::int64_t first = static_cast<std::int64_t>(std::ceil(xs[s] - 0.5));
        std::int64_t last = static_cast<std::int64_t>(std::ceil(xs[s + 1] - 0.5)) - 1;
        first = std::max<std::int64_t>(first, 0);
        last = std::min<std::int64_t>(last, width - 1);
        for (std::int64_t px = first; px <= last; ++px) m.set(py, px);
      }
    }
  }
  return m;
}

/// COCO column-major RLE: position p covers row p % height, column p / height;
/// runs alternate starting with background.
inline MaskBitmap decode_rle(const std::vector<std::int64_t>& counts, std::int64_t height,
                             std::int64_t width) {
  std::int64_t total = 0;
  for (auto c : counts) {
    if (c < 0) throw ValidationError("RLE: negative run length");
    total += c;
  }
  if (total != height * width)
    throw ValidationError("RLE counts sum to " + std::to_string(total) + ", expected " +
                          std::to_string(height * width));
  MaskBitmap m(height, width);
  std::int64_t pos = 0;
  std::uint8_t value = 0;
  for (auto c : counts) {
    if (value)
      for (std::int64_t i = 0; i < c; ++i, ++pos) m.bits[(pos % height) * width + pos / height] = 1;
    else
      pos += c;
    value ^= 1;
  }
  return m;
}

inline std::vector<std::int64_t> encode_rle(const MaskBitmap& m) {
  std::vector<std::int64_t> counts;
  std::uint8_t current = 0;
  std::int64_t run = 0;
  for (std::int64_t p = 0; p < m.height * m.width; ++p) {
    std::uint8_t v = m.bits[(p % m.height) * m.width + p / m.height] ? 1 : 0;
    if (v == current) {
      ++run;
    } else {
      counts.push_back(run);
      current = v;
      run = 1;
    }
  }
  counts.push_back(run);
  return counts;
}

/// Decodes whichever segmentation the record carries, on the image grid.
inline MaskBitmap decode_segmentation(const AnnotationRecord& r, std::int64_t height,
                                      std::int64_t width) {
  if (r.has_rle()) {
    if (r.rle_height != height || r.rle_width != width)
      throw ValidationError("annotation " + std::to_string(r.annotation_id) + " RLE size " +
                            std::to_string(r.rle_height) + "x" + std::to_string(r.rle_width) +
                            " does not match image " + std::to_string(height) + "x" +
                            std::to_string(width));
    return decode_rle(r.rle_counts, height, width);
  }
  return rasterize_polygon(r.polygons, height, width);
}

// ---- mask geometry --------------------------------------------------------

struct MaskBox {
  std::int64_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // inclusive
  std::int64_t height() const { return y1 - y0 + 1; }
  std::int64_t width() const { return x1 - x0 + 1; }
};

inline MaskBox tight_box(const MaskBitmap& m) {
  MaskBox b{m.height, m.width, -1, -1};
  for (std::int64_t y = 0; y < m.height; ++y)
    for (std::int64_t x = 0; x < m.width; ++x)
      if (m.at(y, x)) {
        b.y0 = std::min(b.y0, y);
        b.x0 = std::min(b.x0, x);
        b.y1 = std::max(b.y1, y);
        b.x1 = std::max(b.x1, x);
      }
  if (b.y1 < 0) throw ValidationError("tight_box: empty mask");
  return b;
}

/// First-moment centroid in continuous coordinates (pixel centers at +0.5).
inline std::pair<double, double> mask_centroid(const MaskBitmap& m) {
  double sx = 0.0, sy = 0.0;
  std::int64_t n = 0;
  for (std::int64_t y = 0; y < m.height; ++y)
    for (std::int64_t x = 0; x < m.width; ++x)
      if (m.at(y, x)) {
        sx += x + 0.5;
        sy += y + 0.5;
        ++n;
      }
  if (n == 0) throw ValidationError("mask_centroid: empty mask");
  return {sx / n, sy / n};
}

}  // namespace oddkit
