#include "vasplat/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "vasplat/error.hpp"

namespace vasplat {

Image& Image::operator+=(const Image& other) {
  require_same_shape(*this, other, "image add");
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] += other.data[i];
  }
  return *this;
}

Image& Image::operator*=(double s) {
  for (double& v : data) {
    v *= s;
  }
  return *this;
}

void Image::add_scaled(const Image& other, double s) {
  require_same_shape(*this, other, "image add_scaled");
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] += s * other.data[i];
  }
}

void require_same_shape(const Image& a, const Image& b, const char* what, bool check_channels) {
  if (!a.same_resolution(b) || (check_channels && a.channels != b.channels)) {
    fail(ErrorCode::kResolutionMismatch,
         std::string(what) + ": " + std::to_string(a.width) + "x" + std::to_string(a.height) +
             "x" + std::to_string(a.channels) + " vs " + std::to_string(b.width) + "x" +
             std::to_string(b.height) + "x" + std::to_string(b.channels));
  }
}

namespace {

constexpr double kGamma = 2.2;

unsigned char to_byte(double v, PngEncoding enc) {
  v = std::clamp(v, 0.0, 1.0);
  if (enc == PngEncoding::kGamma22) {
    v = std::pow(v, 1.0 / kGamma);
  }
  return static_cast<unsigned char>(std::lround(v * 255.0));
}

double from_byte(unsigned char b, PngEncoding enc) {
  const double v = b / 255.0;
  return enc == PngEncoding::kGamma22 ? std::pow(v, kGamma) : v;
}

}  // namespace

std::vector<unsigned char> encode_png(const Image& image, PngEncoding encoding) {
  if (image.channels != 1 && image.channels != 3) {
    fail(ErrorCode::kInvalidArgument, "png export supports 1 or 3 channels");
  }
  std::vector<unsigned char> pixels(image.data.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = to_byte(image.data[i], encoding);
  }
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(image.width);
  desc.height = static_cast<png_uint_32>(image.height);
  desc.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(desc, size, 0, pixels.data(), 0, nullptr)) {
    fail(ErrorCode::kIo, std::string("png encode: ") + desc.message);
  }
  std::vector<unsigned char> bytes(size);
  if (!png_image_write_to_memory(&desc, bytes.data(), &size, 0, pixels.data(), 0, nullptr)) {
    fail(ErrorCode::kIo, std::string("png encode: ") + desc.message);
  }
  bytes.resize(size);
  return bytes;
}

void write_png(const std::filesystem::path& path, const Image& image, PngEncoding encoding) {
  const std::vector<unsigned char> bytes = encode_png(image, encoding);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Image read_png(const std::filesystem::path& path, int channels, PngEncoding encoding) {
  if (channels != 1 && channels != 3) {
    fail(ErrorCode::kInvalidArgument, "png import supports 1 or 3 channels");
  }
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&desc, path.c_str())) {
    fail(ErrorCode::kIo, "cannot read png " + path.string() + ": " + desc.message);
  }
  desc.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<unsigned char> pixels(PNG_IMAGE_SIZE(desc));
  if (!png_image_finish_read(&desc, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&desc);
    fail(ErrorCode::kIo, "cannot decode png " + path.string() + ": " + desc.message);
  }
  Image out(static_cast<int>(desc.width), static_cast<int>(desc.height), channels);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = from_byte(pixels[i], encoding);
  }
  return out;
}

Image encode_normals(const Image& normals) {
  Image enc(normals.width, normals.height, 3);
  for (std::size_t i = 0; i < enc.data.size(); ++i) {
    enc.data[i] = 0.5 * (normals.data[i] + 1.0);
  }
  return enc;
}

Image read_normal_png(const std::filesystem::path& path) {
  Image img = read_png(path, 3, PngEncoding::kLinear);
  for (double& v : img.data) {
    v = 2.0 * v - 1.0;
  }
  return img;
}

void write_normal_png(const std::filesystem::path& path, const Image& normals) {
  write_png(path, encode_normals(normals), PngEncoding::kLinear);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) {
      fail(ErrorCode::kIo, "cannot write " + tmp.string());
    }
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
      fail(ErrorCode::kIo, "short write to " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    fail(ErrorCode::kIo, "cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace vasplat
