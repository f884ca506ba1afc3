#include "opt/image.hpp"

#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

#include "opt/error.hpp"

namespace opt {

void FrameImage::validate() const {
  require(height > 0 && width > 0, "image has empty shape");
  require(pixels.size() == static_cast<size_t>(height) * width * 3, "image buffer does not match H×W×3");
  for (float v : pixels) require(std::isfinite(v) && v >= 0.0F && v <= 1.0F, "image value outside [0,1]");
}

torch::Tensor to_tensor(const FrameImage& img) {
  auto hwc = torch::from_blob(const_cast<float*>(img.pixels.data()), {img.height, img.width, 3}, torch::kFloat32);
  return hwc.permute({2, 0, 1}).contiguous().clone();
}

FrameImage from_tensor(const torch::Tensor& t) {
  auto x = t.detach().to(torch::kCPU, torch::kFloat32);
  if (x.dim() == 4) {
    require(x.size(0) == 1, "from_tensor expects a single image");
    x = x[0];
  }
  require(x.dim() == 3 && x.size(0) == 3, "from_tensor expects [3,H,W]");
  x = x.clamp(0.0, 1.0).permute({1, 2, 0}).contiguous();
  FrameImage img(static_cast<int>(x.size(0)), static_cast<int>(x.size(1)));
  std::memcpy(img.pixels.data(), x.data_ptr<float>(), img.pixels.size() * sizeof(float));
  return img;
}

namespace {
struct FileCloser {
  void operator()(FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;
}  // namespace

void write_png(const std::filesystem::path& path, const FrameImage& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed header fields keep output byte-identical across runs.
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width * 3; ++x) {
      float v = std::clamp(img.pixels[static_cast<size_t>(y) * img.width * 3 + x], 0.0F, 1.0F);
      row[x] = static_cast<png_byte>(std::lround(v * 255.0F));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

FrameImage read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot read " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_gray_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  int w = static_cast<int>(png_get_image_width(png, info));
  int h = static_cast<int>(png_get_image_height(png, info));
  if (png_get_rowbytes(png, info) != static_cast<size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG layout in " + path.string());
  }
  FrameImage img(h, w);
  std::vector<png_byte> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w * 3; ++x) img.pixels[static_cast<size_t>(y) * w * 3 + x] = row[x] / 255.0F;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace opt
