#include "nerfsim/io.h"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "nerfsim/common.h"

namespace nerfsim {
namespace {

uint32_t crc32_of(const uint8_t* data, size_t n, uint32_t seed = 0) {
  return uint32_t(::crc32(seed, data, uInt(n)));
}

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

uint32_t get_u32be(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
         (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& payload) {
  put_u32be(out, uint32_t(payload.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uint32_t crc = crc32_of(out.data() + start, out.size() - start);
  put_u32be(out, crc);
}

std::vector<uint8_t> zlib_deflate(const std::vector<uint8_t>& in) {
  uLongf bound = compressBound(uLong(in.size()));
  std::vector<uint8_t> out(bound);
  if (compress2(out.data(), &bound, in.data(), uLong(in.size()), 6) != Z_OK)
    throw Error("png: deflate failed");
  out.resize(bound);
  return out;
}

std::vector<uint8_t> zlib_inflate(const uint8_t* in, size_t n,
                                  size_t expected) {
  std::vector<uint8_t> out(expected);
  uLongf len = uLongf(expected);
  if (uncompress(out.data(), &len, in, uLong(n)) != Z_OK || len != expected)
    throw Error("png: inflate failed");
  return out;
}

void write_file_atomic(const std::string& path, const void* data, size_t n) {
  namespace fs = std::filesystem;
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open for write: " + tmp);
    f.write(reinterpret_cast<const char*>(data), std::streamsize(n));
    if (!f) throw Error("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open: " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f),
                              std::istreambuf_iterator<char>());
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
  if (img.channels() != 1 && img.channels() != 3)
    throw Error("write_png: only 1 or 3 channels");
  const int w = img.width(), h = img.height(), ch = img.channels();
  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

  std::vector<uint8_t> ihdr;
  put_u32be(ihdr, uint32_t(w));
  put_u32be(ihdr, uint32_t(h));
  ihdr.push_back(8);                       // bit depth
  ihdr.push_back(ch == 3 ? 2 : 0);         // color type
  ihdr.push_back(0);                       // compression
  ihdr.push_back(0);                       // filter
  ihdr.push_back(0);                       // interlace
  append_chunk(out, "IHDR", ihdr);

  std::vector<uint8_t> scan;
  scan.reserve(size_t(h) * (size_t(w) * ch + 1));
  for (int y = 0; y < h; ++y) {
    scan.push_back(0);  // filter type none
    const uint8_t* row = img.data() + size_t(y) * w * ch;
    scan.insert(scan.end(), row, row + size_t(w) * ch);
  }
  append_chunk(out, "IDAT", zlib_deflate(scan));
  append_chunk(out, "IEND", {});
  write_file_atomic(path, out.data(), out.size());
}

ImageU8 read_png(const std::string& path) {
  std::vector<uint8_t> buf = read_file(path);
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
    throw Error("read_png: not a png: " + path);

  int w = 0, h = 0, ch = 0;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  while (pos + 8 <= buf.size()) {
    uint32_t len = get_u32be(buf.data() + pos);
    const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
    const uint8_t* payload = buf.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      w = int(get_u32be(payload));
      h = int(get_u32be(payload + 4));
      int depth = payload[8], color = payload[9];
      if (depth != 8 || (color != 0 && color != 2) || payload[12] != 0)
        throw Error("read_png: unsupported format: " + path);
      ch = (color == 2) ? 3 : 1;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (w <= 0 || h <= 0) throw Error("read_png: missing IHDR: " + path);

  size_t stride = size_t(w) * ch;
  std::vector<uint8_t> scan =
      zlib_inflate(idat.data(), idat.size(), size_t(h) * (stride + 1));

  ImageU8 img(w, h, ch);
  std::vector<uint8_t> prev(stride, 0);
  for (int y = 0; y < h; ++y) {
    uint8_t filter = scan[size_t(y) * (stride + 1)];
    const uint8_t* src = scan.data() + size_t(y) * (stride + 1) + 1;
    uint8_t* dst = img.data() + size_t(y) * stride;
    for (size_t i = 0; i < stride; ++i) {
      int a = i >= size_t(ch) ? dst[i - ch] : 0;
      int b = prev[i];
      int c = i >= size_t(ch) ? prev[i - ch] : 0;
      int raw = src[i];
      switch (filter) {
        case 0: break;
        case 1: raw += a; break;
        case 2: raw += b; break;
        case 3: raw += (a + b) / 2; break;
        case 4: raw += paeth(a, b, c); break;
        default: throw Error("read_png: bad filter");
      }
      dst[i] = uint8_t(raw & 0xff);
    }
    std::memcpy(prev.data(), dst, stride);
  }
  return img;
}

void write_raw_f32(const std::string& path, const ImageF& img) {
  write_file_atomic(path, img.data(), img.size() * sizeof(float));
  nlohmann::json side = {{"width", img.width()},
                         {"height", img.height()},
                         {"channels", img.channels()},
                         {"dtype", "float32_le"}};
  write_text_atomic(path + ".json", side.dump(2) + "\n");
}

ImageF read_raw_f32(const std::string& path) {
  nlohmann::json side = nlohmann::json::parse(read_text(path + ".json"));
  ImageF img(side.at("width").get<int>(), side.at("height").get<int>(),
             side.at("channels").get<int>());
  std::vector<uint8_t> buf = read_file(path);
  if (buf.size() != img.size() * sizeof(float))
    throw Error("read_raw_f32: size mismatch: " + path);
  std::memcpy(img.data(), buf.data(), buf.size());
  return img;
}

void write_text_atomic(const std::string& path, const std::string& content) {
  write_file_atomic(path, content.data(), content.size());
}

std::string read_text(const std::string& path) {
  std::vector<uint8_t> buf = read_file(path);
  return std::string(buf.begin(), buf.end());
}

ImageU8 to_u8(const ImageD& img) {
  ImageU8 out(img.width(), img.height(), img.channels());
  for (size_t i = 0; i < img.size(); ++i)
    out.raw()[i] = uint8_t(std::lround(clamp01(img.raw()[i]) * 255.0));
  return out;
}

ImageD to_f64(const ImageU8& img) {
  ImageD out(img.width(), img.height(), img.channels());
  for (size_t i = 0; i < img.size(); ++i)
    out.raw()[i] = img.raw()[i] / 255.0;
  return out;
}

}  // namespace nerfsim
