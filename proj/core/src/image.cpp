#include "stn/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace stn {

namespace {

std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

}  // namespace

void write_pgm(const ImageFrame& frame, const std::string& path) {
  if (frame.width <= 0 || frame.height <= 0) {
    throw std::runtime_error("write_pgm: empty frame");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P5\n" << frame.width << " " << frame.height << "\n255\n";
  std::vector<std::uint8_t> row(frame.width);
  for (int y = 0; y < frame.height; ++y) {
    for (int x = 0; x < frame.width; ++x) row[x] = to_byte(frame.at(y, x));
    out.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

ImageFrame read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw std::runtime_error("read_pgm: " + path + " is not binary PGM");
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255) {
    throw std::runtime_error("read_pgm: bad header in " + path);
  }
  in.get();  // single whitespace after maxval
  ImageFrame frame(w, h);
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw std::runtime_error("read_pgm: truncated pixel data in " + path);
  for (std::size_t i = 0; i < raw.size(); ++i) frame.pixels[i] = raw[i] / 255.0;
  return frame;
}

void write_ppm(const std::vector<double>& r, const std::vector<double>& g,
               const std::vector<double>& b, int width, int height, const std::string& path) {
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (r.size() != n || g.size() != n || b.size() != n) {
    throw std::runtime_error("write_ppm: plane size mismatch");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
  out << "P6\n" << width << " " << height << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(width) * 3);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      row[x * 3 + 0] = to_byte(r[i]);
      row[x * 3 + 1] = to_byte(g[i]);
      row[x * 3 + 2] = to_byte(b[i]);
    }
    out.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

}  // namespace stn
