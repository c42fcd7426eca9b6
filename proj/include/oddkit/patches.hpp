#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "oddkit/coco.hpp"
#include "oddkit/common.hpp"
#include "oddkit/image.hpp"
#include "oddkit/image_io.hpp"
#include "oddkit/rng.hpp"
#include "oddkit/tensor.hpp"

namespace oddkit {

// Object patches: background-zeroed, centroid-centered, square crops of one
// annotated object, plus online augmentation and the train/validation split.

enum class PatchLabel { normal, anomaly, unlabeled };

inline const char* label_name(PatchLabel l) {
  switch (l) {
    case PatchLabel::normal: return "normal";
    case PatchLabel::anomaly: return "anomaly";
    default: return "unlabeled";
  }
}

inline PatchLabel label_from_name(const std::string& s) {
  if (s == "normal") return PatchLabel::normal;
  if (s == "anomaly") return PatchLabel::anomaly;
  if (s == "unlabeled") return PatchLabel::unlabeled;
  throw ValidationError("unknown patch label '" + s + "'");
}

struct ObjectPatch {
  std::string patch_id;
  Tensor<float> pixels;   // [S,S,3], values in [0,1], background exactly 0
  Tensor<float> support;  // [S,S], 1 inside the (transformed) mask
  std::int64_t category_id = 0;
  std::int64_t image_id = 0;
  std::int64_t annotation_id = 0;
  PatchLabel label = PatchLabel::unlabeled;

  std::int64_t size() const { return pixels.shape[0]; }
};

struct AugmentationPolicy {
  double max_rotation_deg = 5.0;
  double max_shift_frac = 0.01;
  double max_brightness_frac = 0.10;
  double zoom_lo = 1.00;
  double zoom_hi = 1.25;
  bool horizontal_flip = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_rotation_deg < 0 || max_shift_frac < 0 || max_brightness_frac < 0)
      throw ValidationError("augmentation ranges must be non-negative");
    if (!(zoom_lo > 0) || zoom_lo > zoom_hi)
      throw ValidationError("augmentation zoom range must satisfy 0 < lo <= hi");
  }

  static AugmentationPolicy none(std::uint64_t seed = 0) {
    AugmentationPolicy p;
    p.max_rotation_deg = 0;
    p.max_shift_frac = 0;
    p.max_brightness_frac = 0;
    p.zoom_lo = p.zoom_hi = 1.0;
    p.horizontal_flip = false;
    p.seed = seed;
    return p;
  }
};

struct DatasetSplit {
  std::vector<ObjectPatch> train;
  std::vector<ObjectPatch> validation;
  double split_fraction = 0.85;
  std::uint64_t seed = 0;
};

// ---- extraction -----------------------------------------------------------

/// Crops the record's mask-tight box out of the image, zeroes everything off
/// the mask, recenters on the mask centroid inside a square canvas, and
/// resizes to patch_size. Aspect ratio is preserved throughout.
inline ObjectPatch extract_patch(const Tensor<float>& image, const AnnotationRecord& record,
                                 std::int64_t patch_size) {
  if (image.rank() != 3 || image.shape[2] != 3)
    throw ShapeError("extract_patch expects an [H,W,3] image, got " + shape_str(image.shape));
  if (patch_size < 1) throw ValidationError("patch_size must be positive");
  const std::int64_t h = image.shape[0], w = image.shape[1];

  MaskBitmap mask = decode_segmentation(record, h, w);
  if (mask.area() == 0)
    throw ExtractionError("annotation " + std::to_string(record.annotation_id) +
                          ": mask is empty or entirely outside the image");

  MaskBox box = tight_box(mask);
  const std::int64_t ch = box.height(), cw = box.width();
  MaskedImage crop{Tensor<float>({ch, cw, 3}), Tensor<float>({ch, cw})};
  for (std::int64_t y = 0; y < ch; ++y)
    for (std::int64_t x = 0; x < cw; ++x)
      if (mask.at(box.y0 + y, box.x0 + x)) {
        crop.support[y * cw + x] = 1.0f;
        for (std::int64_t c = 0; c < 3; ++c)
          crop.pixels[(y * cw + x) * 3 + c] = image[((box.y0 + y) * w + box.x0 + x) * 3 + c];
      }

  // centroid of the cropped mask, continuous coordinates
  double cx = 0.0, cy = 0.0;
  std::int64_t n = 0;
  for (std::int64_t y = 0; y < ch; ++y)
    for (std::int64_t x = 0; x < cw; ++x)
      if (crop.support[y * cw + x] != 0.0f) {
        cx += x + 0.5;
        cy += y + 0.5;
        ++n;
      }
  cx /= n;
  cy /= n;

  // square canvas put so the centroid lands (to integer paste precision) at
  // the canvas center; the +1 margin keeps the rounded offset in bounds
  double reach = std::max(std::max(cx, cw - cx), std::max(cy, ch - cy));
  std::int64_t half = static_cast<std::int64_t>(std::ceil(reach)) + 1;
  std::int64_t side = 2 * half;
  std::int64_t off_x = static_cast<std::int64_t>(std::floor(half - cx + 0.5));
  std::int64_t off_y = static_cast<std::int64_t>(std::floor(half - cy + 0.5));
  off_x = std::clamp<std::int64_t>(off_x, 0, side - cw);
  off_y = std::clamp<std::int64_t>(off_y, 0, side - ch);

  MaskedImage canvas{Tensor<float>({side, side, 3}), Tensor<float>({side, side})};
  for (std::int64_t y = 0; y < ch; ++y)
    for (std::int64_t x = 0; x < cw; ++x) {
      canvas.support[(off_y + y) * side + off_x + x] = crop.support[y * cw + x];
      for (std::int64_t c = 0; c < 3; ++c)
        canvas.pixels[((off_y + y) * side + off_x + x) * 3 + c] = crop.pixels[(y * cw + x) * 3 + c];
    }

  MaskedImage sized = resize_masked(canvas, patch_size);
  ObjectPatch p;
  p.patch_id = "img" + std::to_string(record.image_id) + "_ann" +
               std::to_string(record.annotation_id);
  p.pixels = std::move(sized.pixels);
  p.support = std::move(sized.support);
  p.category_id = record.category_id;
  p.image_id = record.image_id;
  p.annotation_id = record.annotation_id;
  return p;
}

// ---- augmentation ---------------------------------------------------------

/// All random draws for one augmentation, in their application order. A pure
/// function of (seed, patch_id, draw_index).
struct AugmentationDraws {
  double rotation_deg = 0, shift_x = 0, shift_y = 0;
  double brightness = 1, zoom = 1;
  bool flip = false;
};

inline AugmentationDraws augmentation_draws(const AugmentationPolicy& policy,
                                            const std::string& patch_id,
                                            std::uint64_t draw_index) {
  Rng rng = keyed_rng(policy.seed, "augment", fnv1a64(patch_id), draw_index);
  AugmentationDraws d;
  d.rotation_deg = rng.next_uniform(-policy.max_rotation_deg, policy.max_rotation_deg);
  d.shift_x = rng.next_uniform(-policy.max_shift_frac, policy.max_shift_frac);
  d.shift_y = rng.next_uniform(-policy.max_shift_frac, policy.max_shift_frac);
  d.brightness = rng.next_uniform(1.0 - policy.max_brightness_frac, 1.0 + policy.max_brightness_frac);
  d.zoom = rng.next_uniform(policy.zoom_lo, policy.zoom_hi);
  // the flip draw is always consumed so disabling it does not shift the stream
  bool flip_draw = rng.next_bool();
  d.flip = policy.horizontal_flip && flip_draw;
  return d;
}

/// Applies rotation, shift, brightness, zoom, flip in that order. Exact
/// identities (zero rotation/shift, unit zoom, pure flip) skip resampling so
/// a degenerate policy returns bit-identical pixels.
inline ObjectPatch augment(const ObjectPatch& patch, const AugmentationPolicy& policy,
                           std::uint64_t draw_index) {
  policy.validate();
  const std::int64_t s = patch.size();
  AugmentationDraws d = augmentation_draws(policy, patch.patch_id, draw_index);

  MaskedImage img{patch.pixels, patch.support};
  const double c = s / 2.0;

  double tx = d.shift_x * s, ty = d.shift_y * s;
  if (d.rotation_deg != 0.0 || tx != 0.0 || ty != 0.0) {
    Affine fw = Affine::translation(tx, ty).compose(
        Affine::rotation(d.rotation_deg * M_PI / 180.0, c, c));
    img = warp_masked(img, fw.inverse(), s, s);
  }
  if (d.brightness != 1.0) {
    for (std::int64_t i = 0; i < img.pixels.size(); ++i)
      img.pixels[i] = std::clamp(static_cast<float>(img.pixels[i] * d.brightness), 0.0f, 1.0f);
  }
  if (d.zoom != 1.0) {
    double sx = d.flip ? -d.zoom : d.zoom;
    img = warp_masked(img, Affine::scaling(sx, d.zoom, c, c).inverse(), s, s);
  } else if (d.flip) {
    img = mirror_horizontal(img);
  }

  ObjectPatch out = patch;
  out.pixels = std::move(img.pixels);
  out.support = std::move(img.support);
  return out;
}

// ---- split ----------------------------------------------------------------

/// Deterministic image-level split: all patches from one source image land on
/// the same side, and the image counts realize the fraction (5,000 images at
/// 0.85 -> 4,250 / 750).
inline DatasetSplit make_split(const std::vector<ObjectPatch>& patches, double fraction,
                               std::uint64_t seed) {
  if (patches.empty()) throw ValidationError("make_split: no patches");
  if (!(fraction > 0.0) || !(fraction < 1.0))
    throw ValidationError("make_split: fraction must lie strictly between 0 and 1");

  std::set<std::int64_t> ids;
  for (const auto& p : patches) ids.insert(p.image_id);
  std::vector<std::int64_t> order(ids.begin(), ids.end());
  Rng rng = keyed_rng(seed, "split");
  rng.shuffle(order);

  std::int64_t n_train = std::llround(static_cast<double>(order.size()) * fraction);
  n_train = std::clamp<std::int64_t>(n_train, 1, static_cast<std::int64_t>(order.size()));
  std::set<std::int64_t> train_ids(order.begin(), order.begin() + n_train);

  DatasetSplit split;
  split.split_fraction = fraction;
  split.seed = seed;
  for (const auto& p : patches)
    (train_ids.count(p.image_id) ? split.train : split.validation).push_back(p);
  return split;
}

// ---- patch store ----------------------------------------------------------

/// One RGBA PNG per patch (alpha = support) plus a manifest CSV.
inline void write_patch_store(const std::string& dir, const std::vector<ObjectPatch>& patches) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw IoError("cannot write manifest in " + dir);
  manifest << "patch_id,category_id,image_id,annotation_id,label\n";
  for (const auto& p : patches) {
    const std::int64_t s = p.size();
    ImageRgba8 img;
    img.height = s;
    img.width = s;
    img.rgba.resize(static_cast<std::size_t>(s * s * 4));
    for (std::int64_t i = 0; i < s * s; ++i) {
      for (std::int64_t c = 0; c < 3; ++c)
        img.rgba[i * 4 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(p.pixels[i * 3 + c], 0.0f, 1.0f) * 255.0f));
      img.rgba[i * 4 + 3] = p.support[i] != 0.0f ? 255 : 0;
    }
    write_png_rgba((fs::path(dir) / (p.patch_id + ".png")).string(), img);
    manifest << p.patch_id << ',' << p.category_id << ',' << p.image_id << ','
             << p.annotation_id << ',' << label_name(p.label) << '\n';
  }
}

inline std::vector<ObjectPatch> load_patch_store(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw IoError("cannot read manifest in " + dir);
  std::string line;
  std::getline(manifest, line);  // header
  std::vector<ObjectPatch> patches;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i)
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    if (fields.size() != 5) throw ParseError("malformed manifest line: " + line, 0);
    ObjectPatch p;
    p.patch_id = fields[0];
    p.category_id = std::stoll(fields[1]);
    p.image_id = std::stoll(fields[2]);
    p.annotation_id = std::stoll(fields[3]);
    p.label = label_from_name(fields[4]);

    ImageRgba8 img = read_png_rgba((fs::path(dir) / (p.patch_id + ".png")).string());
    p.pixels = Tensor<float>({img.height, img.width, 3});
    p.support = Tensor<float>({img.height, img.width});
    for (std::int64_t i = 0; i < img.height * img.width; ++i) {
      bool inside = img.rgba[i * 4 + 3] != 0;
      p.support[i] = inside ? 1.0f : 0.0f;
      if (inside)
        for (std::int64_t c = 0; c < 3; ++c) p.pixels[i * 3 + c] = img.rgba[i * 4 + c] / 255.0f;
    }
    patches.push_back(std::move(p));
  }
  return patches;
}

/// Stacks patches into an NHWC training batch.
inline Tensor<float> to_batch(const std::vector<const ObjectPatch*>& items) {
  if (items.empty()) throw ValidationError("to_batch: empty batch");
  const std::int64_t s = items[0]->size();
  Tensor<float> batch({static_cast<std::int64_t>(items.size()), s, s, 3});
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->pixels.shape != items[0]->pixels.shape)
      throw ShapeError("to_batch: mixed patch sizes");
    std::copy(items[i]->pixels.v.begin(), items[i]->pixels.v.end(),
              batch.v.begin() + static_cast<std::ptrdiff_t>(i) * s * s * 3);
  }
  return batch;
}

}  // namespace oddkit
