#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "numerics/tensor.hpp"

namespace mingtok::io {

using nn::Tensor;

// Images are [H, W, 3] float tensors with values in [0, 1].

// 8-bit RGB PNG. Alpha and palette inputs are converted to RGB.
Tensor<float> read_png(const std::filesystem::path& path);
// Values are clamped to [0,1] and rounded to 8 bits.
void write_png(const std::filesystem::path& path, const Tensor<float>& image);

// Exact storage: tensor container with a single entry "image".
Tensor<float> read_image_tensor(const std::filesystem::path& path);
void write_image_tensor(const std::filesystem::path& path, const Tensor<float>& image);

// Dispatches on extension: .png or .mtok.
Tensor<float> read_image(const std::filesystem::path& path);

// Smooth deterministic test image: a few low-frequency sinusoids per channel
// squeezed into [0.1, 0.9].
Tensor<float> synthetic_image(std::size_t resolution, std::uint64_t seed);

struct ImageSet {
  std::vector<std::string> keys;
  std::vector<Tensor<float>> images;
};

// format "png" or "tensor": every matching file in dir, sorted by name, key =
// file stem. Images whose size is not resolution x resolution are rejected.
// format "synthetic": `count` generated images keyed "synthetic_<i>".
ImageSet load_images(const std::filesystem::path& dir, const std::string& format, std::size_t resolution,
                     std::size_t count = 4, std::uint64_t seed = 0);

// 10 log10(1 / MSE); +inf for identical images.
double psnr(const Tensor<float>& a, const Tensor<float>& b);
// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5), valid
// positions only; the window shrinks to the image for smaller inputs.
double ssim(const Tensor<float>& a, const Tensor<float>& b);

}  // namespace mingtok::io
