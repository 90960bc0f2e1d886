#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stn {

// Grayscale frame, values in [0,1], row-major.
struct ImageFrame {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  ImageFrame() = default;
  ImageFrame(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, 0.0) {}

  double& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

// Binary PGM (P5, maxval 255). Values are clamped to [0,1] and scaled.
void write_pgm(const ImageFrame& frame, const std::string& path);
ImageFrame read_pgm(const std::string& path);

// Binary PPM (P6) from three channel planes in [0,1], used by the renderer.
void write_ppm(const std::vector<double>& r, const std::vector<double>& g,
               const std::vector<double>& b, int width, int height, const std::string& path);

}  // namespace stn
