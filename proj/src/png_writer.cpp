#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "ciseg/plot.hpp"

namespace ciseg {

namespace {

void put_u32_be(std::string& out, uint32_t v) {
  out.push_back(char(v >> 24));
  out.push_back(char(v >> 16));
  out.push_back(char(v >> 8));
  out.push_back(char(v));
}

void put_chunk(std::string& out, const char type[4], const std::string& payload) {
  put_u32_be(out, uint32_t(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  uint32_t crc = uint32_t(::crc32(0, reinterpret_cast<const Bytef*>(body.data()),
                                  uInt(body.size())));
  put_u32_be(out, crc);
}

}  // namespace

void write_png_rgb(const std::string& path, const uint8_t* rgb, int width, int height) {
  std::string ihdr;
  put_u32_be(ihdr, uint32_t(width));
  put_u32_be(ihdr, uint32_t(height));
  ihdr += char(8);   // bit depth
  ihdr += char(2);   // color type: truecolor
  ihdr += char(0);   // compression
  ihdr += char(0);   // filter
  ihdr += char(0);   // interlace

  // raw scanlines, filter byte 0 per row
  std::string raw;
  raw.reserve(size_t(height) * (size_t(width) * 3 + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(rgb + size_t(y) * width * 3), size_t(width) * 3);
  }
  uLongf comp_len = compressBound(uLong(raw.size()));
  std::string compressed(comp_len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &comp_len,
                reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()), 6) != Z_OK)
    throw std::runtime_error("write_png_rgb: deflate failed");
  compressed.resize(comp_len);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", compressed);
  put_chunk(out, "IEND", "");

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_png_rgb: cannot open " + path);
  f.write(out.data(), std::streamsize(out.size()));
}

}  // namespace ciseg
