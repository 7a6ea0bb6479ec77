#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace mdmd {

//8-bit RGB image, row-major, 3 bytes per pixel.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  ImageU8() = default;
  ImageU8(int w, int h, std::array<std::uint8_t, 3> color = {0, 0, 0})
      : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3) {
    for (size_t i = 0; i < rgb.size(); i += 3)
      for (int c = 0; c < 3; ++c) rgb[i + c] = color[c];
  }

  std::uint8_t& at(int x, int y, int c) {
    return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
};

ImageU8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageU8& image);

// Bilinear sample at continuous pixel-center coordinates (pixel i covers
// [i, i+1), its center at i + 0.5); edges clamp.
double sample_bilinear(const ImageU8& image, double x, double y, int channel);

// Anti-aliased filled shapes; coordinates are continuous pixel positions.
void paint_ellipse(ImageU8& image, double cx, double cy, double rx, double ry,
                   std::array<std::uint8_t, 3> color, int supersample = 3);
void paint_triangle(ImageU8& image, const std::array<double, 6>& xy,
                    std::array<std::uint8_t, 3> color, int supersample = 3);

// Overlay primitives.
void draw_line(ImageU8& image, double x0, double y0, double x1, double y1,
               std::array<std::uint8_t, 3> color);
void draw_dot(ImageU8& image, double x, double y,
              std::array<std::uint8_t, 3> color, int radius = 1);

}  // namespace mdmd
