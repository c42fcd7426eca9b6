#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "oddkit/common.hpp"
#include "oddkit/tensor.hpp"

namespace oddkit {

// Minimal PNG/JPEG bridge. Everything becomes 8-bit RGB on read; float images
// in [0,1] are quantized on write. Format is sniffed from the file header,
// not the extension.

namespace detail {

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace detail

/// 8-bit interleaved RGB.
struct ImageU8 {
  std::int64_t height = 0, width = 0;
  std::vector<std::uint8_t> rgb;  // height*width*3
};

inline ImageU8 read_png(const std::string& path) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str()))
    throw IoError("failed to open PNG " + path + ": " + im.message);
  im.format = PNG_FORMAT_RGB;
  ImageU8 out;
  out.height = im.height;
  out.width = im.width;
  out.rgb.resize(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, out.rgb.data(), 0, nullptr)) {
    std::string msg = im.message;
    png_image_free(&im);
    throw IoError("failed to decode PNG " + path + ": " + msg);
  }
  return out;
}

inline ImageU8 read_jpeg(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("failed to open JPEG " + path);
  jpeg_decompress_struct cinfo{};
  detail::JpegErrorMgr err{};
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = detail::jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    throw IoError("failed to decode JPEG " + path + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  ImageU8 out;
  out.height = cinfo.output_height;
  out.width = cinfo.output_width;
  out.rgb.resize(static_cast<std::size_t>(out.height * out.width * 3));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(f);
  return out;
}

/// Sniffs PNG vs JPEG by magic bytes.
inline ImageU8 read_image(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("failed to open image " + path);
  unsigned char magic[4] = {0};
  std::size_t got = std::fread(magic, 1, 4, f);
  std::fclose(f);
  if (got >= 4 && magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G')
    return read_png(path);
  if (got >= 2 && magic[0] == 0xFF && magic[1] == 0xD8) return read_jpeg(path);
  throw IoError("unrecognized image format for " + path);
}

/// 8-bit interleaved RGBA; alpha carries a patch's support plane.
struct ImageRgba8 {
  std::int64_t height = 0, width = 0;
  std::vector<std::uint8_t> rgba;  // height*width*4
};

inline ImageRgba8 read_png_rgba(const std::string& path) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str()))
    throw IoError("failed to open PNG " + path + ": " + im.message);
  im.format = PNG_FORMAT_RGBA;
  ImageRgba8 out;
  out.height = im.height;
  out.width = im.width;
  out.rgba.resize(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, out.rgba.data(), 0, nullptr)) {
    std::string msg = im.message;
    png_image_free(&im);
    throw IoError("failed to decode PNG " + path + ": " + msg);
  }
  return out;
}

inline void write_png_rgba(const std::string& path, const ImageRgba8& img) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = PNG_FORMAT_RGBA;
  if (!png_image_write_to_file(&im, path.c_str(), 0, img.rgba.data(), 0, nullptr))
    throw IoError("failed to write PNG " + path + ": " + im.message);
}

inline void write_png(const std::string& path, const ImageU8& img) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&im, path.c_str(), 0, img.rgb.data(), 0, nullptr))
    throw IoError("failed to write PNG " + path + ": " + im.message);
}

/// [H,W,C] floats in [0,1] -> 8-bit RGB (gray replicated across channels).
inline ImageU8 to_u8(const Tensor<float>& img) {
  if (img.rank() != 3 || (img.shape[2] != 3 && img.shape[2] != 1))
    throw ShapeError("to_u8 expects [H,W,3] or [H,W,1], got " + shape_str(img.shape));
  ImageU8 out;
  out.height = img.shape[0];
  out.width = img.shape[1];
  out.rgb.resize(static_cast<std::size_t>(out.height * out.width * 3));
  const std::int64_t c = img.shape[2];
  for (std::int64_t i = 0; i < out.height * out.width; ++i)
    for (std::int64_t ch = 0; ch < 3; ++ch) {
      float v = img[i * c + (c == 3 ? ch : 0)];
      out.rgb[i * 3 + ch] =
          static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
  return out;
}

/// 8-bit RGB -> [H,W,3] floats in [0,1].
inline Tensor<float> to_float(const ImageU8& img) {
  Tensor<float> out({img.height, img.width, 3});
  for (std::size_t i = 0; i < img.rgb.size(); ++i)
    out[static_cast<std::int64_t>(i)] = img.rgb[i] / 255.0f;
  return out;
}

inline void write_png_float(const std::string& path, const Tensor<float>& img) {
  write_png(path, to_u8(img));
}

}  // namespace oddkit
