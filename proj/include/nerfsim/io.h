#pragma once

#include <string>

#include "nerfsim/image.h"

namespace nerfsim {

// 8-bit PNG, 1 or 3 channels, non-interlaced. Writes are atomic
// (temp file + rename) so interrupted runs never leave partial outputs.
void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

// Little-endian float32 raw blob with a JSON sidecar {width,height,channels}
// at <path>.json.
void write_raw_f32(const std::string& path, const ImageF& img);
ImageF read_raw_f32(const std::string& path);

void write_text_atomic(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);

// [0,1] double image <-> 8-bit, with round-to-nearest quantization.
ImageU8 to_u8(const ImageD& img);
ImageD to_f64(const ImageU8& img);

inline ImageF to_f32(const ImageD& img) {
  ImageF out(img.width(), img.height(), img.channels());
  for (size_t i = 0; i < img.size(); ++i) out.raw()[i] = float(img.raw()[i]);
  return out;
}
inline ImageD to_f64(const ImageF& img) {
  ImageD out(img.width(), img.height(), img.channels());
  for (size_t i = 0; i < img.size(); ++i) out.raw()[i] = double(img.raw()[i]);
  return out;
}

}  // namespace nerfsim
