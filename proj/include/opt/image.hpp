#pragma once

#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace opt {

// H×W×3 image, row-major interleaved RGB, values in [0,1].
struct FrameImage {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  FrameImage() = default;
  FrameImage(int h, int w, float fill = 0.0F) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  bool same_shape(const FrameImage& o) const { return height == o.height && width == o.width; }

  // Throws ValidationError unless square-or-not shape is consistent and values lie in [0,1].
  void validate() const;
};

// [3,H,W] float tensor.
torch::Tensor to_tensor(const FrameImage& img);
// Accepts [3,H,W] or [1,3,H,W]; values are clamped into [0,1].
FrameImage from_tensor(const torch::Tensor& t);

// 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const FrameImage& img);
FrameImage read_png(const std::filesystem::path& path);

}  // namespace opt
