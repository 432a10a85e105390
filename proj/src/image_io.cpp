#include "episeg/image_io.hpp"

#include <fstream>
#include <stdexcept>

namespace episeg {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& why) {
  throw std::runtime_error(path + ": " + why);
}

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  for (;;) {
    const int c = in.get();
    if (c == EOF) return tok;
    if (c == '#') {
      while (in.good() && in.get() != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
}

struct Header {
  std::int64_t width = 0, height = 0;
};

Header read_header(std::istream& in, const std::string& path, const char* magic) {
  if (header_token(in) != magic) fail(path, std::string("expected ") + magic + " header");
  Header h;
  try {
    h.width = std::stoll(header_token(in));
    h.height = std::stoll(header_token(in));
    const long long maxval = std::stoll(header_token(in));
    if (maxval != 255) fail(path, "only maxval 255 is supported");
  } catch (const std::logic_error&) {
    fail(path, "malformed header");
  }
  if (h.width <= 0 || h.height <= 0) fail(path, "non-positive dimensions");
  return h;
}

void write_header(std::ostream& out, const char* magic, std::int64_t w, std::int64_t h) {
  out << magic << "\n" << w << " " << h << "\n255\n";
}

}  // namespace

void write_ppm(const std::string& path, const RgbBuffer& image) {
  const std::int64_t hw = image.height * image.width;
  if (image.height <= 0 || image.width <= 0 ||
      image.planar.size() != static_cast<std::size_t>(3 * hw))
    fail(path, "inconsistent RGB buffer");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  write_header(out, "P6", image.width, image.height);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(image.width) * 3);
  for (std::int64_t y = 0; y < image.height; ++y) {
    for (std::int64_t x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x * 3 + c)] =
            image.planar[static_cast<std::size_t>(c * hw + y * image.width + x)];
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) fail(path, "write failed");
}

RgbBuffer read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");
  const Header h = read_header(in, path, "P6");
  RgbBuffer image;
  image.height = h.height;
  image.width = h.width;
  const std::int64_t hw = h.height * h.width;
  image.planar.resize(static_cast<std::size_t>(3 * hw));
  std::vector<std::uint8_t> interleaved(static_cast<std::size_t>(3 * hw));
  in.read(reinterpret_cast<char*>(interleaved.data()),
          static_cast<std::streamsize>(interleaved.size()));
  if (in.gcount() != static_cast<std::streamsize>(interleaved.size()))
    fail(path, "truncated pixel data");
  for (std::int64_t y = 0; y < h.height; ++y)
    for (std::int64_t x = 0; x < h.width; ++x)
      for (int c = 0; c < 3; ++c)
        image.planar[static_cast<std::size_t>(c * hw + y * h.width + x)] =
            interleaved[static_cast<std::size_t>((y * h.width + x) * 3 + c)];
  return image;
}

void write_pgm(const std::string& path, const GrayBuffer& raster) {
  if (raster.height <= 0 || raster.width <= 0 ||
      raster.values.size() != static_cast<std::size_t>(raster.height * raster.width))
    fail(path, "inconsistent gray buffer");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  write_header(out, "P5", raster.width, raster.height);
  out.write(reinterpret_cast<const char*>(raster.values.data()),
            static_cast<std::streamsize>(raster.values.size()));
  if (!out) fail(path, "write failed");
}

GrayBuffer read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");
  const Header h = read_header(in, path, "P5");
  GrayBuffer raster;
  raster.height = h.height;
  raster.width = h.width;
  raster.values.resize(static_cast<std::size_t>(h.height * h.width));
  in.read(reinterpret_cast<char*>(raster.values.data()),
          static_cast<std::streamsize>(raster.values.size()));
  if (in.gcount() != static_cast<std::streamsize>(raster.values.size()))
    fail(path, "truncated pixel data");
  return raster;
}

}  // namespace episeg
