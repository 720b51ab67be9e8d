#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace vasplat {

/// Interleaved float image (row-major, channels innermost). Color images
/// hold linear RGB.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  double& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool same_shape(const Image& other) const {
    return width == other.width && height == other.height && channels == other.channels;
  }
  bool same_resolution(const Image& other) const {
    return width == other.width && height == other.height;
  }

  Image& operator+=(const Image& other);
  Image& operator*=(double s);
  /// this += s * other
  void add_scaled(const Image& other, double s);
};

/// Throws kResolutionMismatch unless the two images have equal width/height
/// (and channel count when `check_channels`).
void require_same_shape(const Image& a, const Image& b, const char* what,
                        bool check_channels = true);

// PNG IO. 8-bit color PNGs are gamma-2.2 encoded; `decode_gamma` maps them
// to linear values. Masks and normal maps are read without gamma.
enum class PngEncoding { kLinear, kGamma22 };

Image read_png(const std::filesystem::path& path, int channels, PngEncoding encoding);
void write_png(const std::filesystem::path& path, const Image& image, PngEncoding encoding);
std::vector<unsigned char> encode_png(const Image& image, PngEncoding encoding);

/// Normals stored as pixel = (n + 1) / 2.
Image read_normal_png(const std::filesystem::path& path);
void write_normal_png(const std::filesystem::path& path, const Image& normals);
Image encode_normals(const Image& normals);

/// Writes a file through a temporary sibling and an atomic rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace vasplat
