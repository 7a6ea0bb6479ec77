#include "mdmd/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "mdmd/error.hpp"

namespace mdmd {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageU8 read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) fail("io", "cannot open " + path.string());

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail("io", "png reader allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail("io", "png reader allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("io", "corrupt png: " + path.string());
  }

  png_init_io(png, file.get());
  png_read_info(png, info);

  // Normalize every variant to 8-bit RGB.
  png_set_expand(png);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (png_get_color_type(png, info) & PNG_COLOR_MASK_ALPHA)
    png_set_strip_alpha(png);
  int color_type = png_get_color_type(png, info);
  if (color_type == PNG_COLOR_TYPE_GRAY ||
      color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  ImageU8 image(static_cast<int>(png_get_image_width(png, info)),
                static_cast<int>(png_get_image_height(png, info)));
  if (png_get_rowbytes(png, info) != static_cast<size_t>(image.width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("io", "unsupported png layout: " + path.string());
  }
  std::vector<png_bytep> rows(image.height);
  for (int y = 0; y < image.height; ++y)
    rows[y] = image.rgb.data() + static_cast<size_t>(y) * image.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

void write_png(const std::filesystem::path& path, const ImageU8& image) {
  if (image.width <= 0 || image.height <= 0)
    fail("io", "cannot write empty image");
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) fail("io", "cannot write " + path.string());

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail("io", "png writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail("io", "png writer allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail("io", "png write failed: " + path.string());
  }

  png_init_io(png, file.get());
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(image.height);
  for (int y = 0; y < image.height; ++y)
    rows[y] = const_cast<png_bytep>(image.rgb.data() +
                                    static_cast<size_t>(y) * image.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

double sample_bilinear(const ImageU8& image, double x, double y, int channel) {
  // Shift to index space where texel i sits at coordinate i.
  double fx = x - 0.5;
  double fy = y - 0.5;
  int x0 = static_cast<int>(std::floor(fx));
  int y0 = static_cast<int>(std::floor(fy));
  double tx = fx - x0;
  double ty = fy - y0;
  auto fetch = [&](int xi, int yi) {
    xi = std::clamp(xi, 0, image.width - 1);
    yi = std::clamp(yi, 0, image.height - 1);
    return static_cast<double>(image.at(xi, yi, channel));
  };
  double top = fetch(x0, y0) * (1 - tx) + fetch(x0 + 1, y0) * tx;
  double bot = fetch(x0, y0 + 1) * (1 - tx) + fetch(x0 + 1, y0 + 1) * tx;
  return top * (1 - ty) + bot * ty;
}

namespace {

// Blends `color` over every pixel in the shape's bounding box with coverage
// estimated from supersample^2 point-in-shape tests.
template <typename Inside>
void paint_shape(ImageU8& image, double min_x, double min_y, double max_x,
                 double max_y, std::array<std::uint8_t, 3> color,
                 int supersample, Inside inside) {
  int s = std::max(1, supersample);
  int px0 = std::max(0, static_cast<int>(std::floor(min_x)));
  int py0 = std::max(0, static_cast<int>(std::floor(min_y)));
  int px1 = std::min(image.width - 1, static_cast<int>(std::ceil(max_x)));
  int py1 = std::min(image.height - 1, static_cast<int>(std::ceil(max_y)));
  for (int py = py0; py <= py1; ++py) {
    for (int px = px0; px <= px1; ++px) {
      int hits = 0;
      for (int sy = 0; sy < s; ++sy)
        for (int sx = 0; sx < s; ++sx)
          if (inside(px + (sx + 0.5) / s, py + (sy + 0.5) / s)) ++hits;
      if (hits == 0) continue;
      double cover = static_cast<double>(hits) / (s * s);
      for (int c = 0; c < 3; ++c) {
        double mixed = image.at(px, py, c) * (1 - cover) + color[c] * cover;
        image.at(px, py, c) = static_cast<std::uint8_t>(std::lround(mixed));
      }
    }
  }
}

}  // namespace

void paint_ellipse(ImageU8& image, double cx, double cy, double rx, double ry,
                   std::array<std::uint8_t, 3> color, int supersample) {
  if (rx <= 0 || ry <= 0) return;
  paint_shape(
      image, cx - rx, cy - ry, cx + rx, cy + ry, color, supersample,
      [&](double x, double y) {
        double u = (x - cx) / rx;
        double v = (y - cy) / ry;
        return u * u + v * v <= 1.0;
      });
}

void paint_triangle(ImageU8& image, const std::array<double, 6>& xy,
                    std::array<std::uint8_t, 3> color, int supersample) {
  double ax = xy[0], ay = xy[1], bx = xy[2], by = xy[3], cx = xy[4], cy = xy[5];
  double area = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay);
  if (area == 0) return;
  paint_shape(
      image, std::min({ax, bx, cx}), std::min({ay, by, cy}),
      std::max({ax, bx, cx}), std::max({ay, by, cy}), color, supersample,
      [&](double x, double y) {
        double w0 = (bx - ax) * (y - ay) - (x - ax) * (by - ay);
        double w1 = (cx - bx) * (y - by) - (x - bx) * (cy - by);
        double w2 = (ax - cx) * (y - cy) - (x - cx) * (ay - cy);
        if (area < 0) {
          w0 = -w0;
          w1 = -w1;
          w2 = -w2;
        }
        return w0 >= 0 && w1 >= 0 && w2 >= 0;
      });
}

void draw_line(ImageU8& image, double x0, double y0, double x1, double y1,
               std::array<std::uint8_t, 3> color) {
  double steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  int n = std::max(1, static_cast<int>(std::ceil(steps)));
  for (int i = 0; i <= n; ++i) {
    double t = static_cast<double>(i) / n;
    int x = static_cast<int>(std::lround(x0 + (x1 - x0) * t));
    int y = static_cast<int>(std::lround(y0 + (y1 - y0) * t));
    if (x < 0 || y < 0 || x >= image.width || y >= image.height) continue;
    for (int c = 0; c < 3; ++c) image.at(x, y, c) = color[c];
  }
}

void draw_dot(ImageU8& image, double x, double y,
              std::array<std::uint8_t, 3> color, int radius) {
  int cx = static_cast<int>(std::lround(x));
  int cy = static_cast<int>(std::lround(y));
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy > radius * radius) continue;
      int px = cx + dx, py = cy + dy;
      if (px < 0 || py < 0 || px >= image.width || py >= image.height) continue;
      for (int c = 0; c < 3; ++c) image.at(px, py, c) = color[c];
    }
  }
}

}  // namespace mdmd
