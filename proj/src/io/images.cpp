#include "io/images.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "numerics/container.hpp"
#include "numerics/error.hpp"
#include "numerics/rng.hpp"

namespace mingtok::io {

namespace {

void check_rgb(const Tensor<float>& image, const std::string& what) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ValidationError(what + ": expected an [H, W, 3] image, got " + nn::shape_str(image.shape()));
  }
}

}  // namespace

Tensor<float> read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  std::vector<float> data(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) data[i] = static_cast<float>(buf[i]) / 255.0f;
  return Tensor<float>::from({img.height, img.width, 3}, std::move(data));
}

void write_png(const std::filesystem::path& path, const Tensor<float>& image) {
  check_rgb(image, "write_png");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.dim(1));
  img.height = static_cast<png_uint_32>(image.dim(0));
  img.format = PNG_FORMAT_RGB;
  auto v = image.values();
  std::vector<png_byte> buf(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    buf[i] = static_cast<png_byte>(std::lround(std::clamp(static_cast<double>(v[i]), 0.0, 1.0) * 255.0));
  }
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + img.message);
  }
}

Tensor<float> read_image_tensor(const std::filesystem::path& path) {
  const auto entries = nn::read_container(path);
  Tensor<float> image = nn::from_array<float>(nn::find_entry(entries, "image"));
  check_rgb(image, path.string());
  return image;
}

void write_image_tensor(const std::filesystem::path& path, const Tensor<float>& image) {
  check_rgb(image, "write_image_tensor");
  nn::write_container(path, {nn::to_array("image", image)});
}

Tensor<float> read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png") return read_png(path);
  if (ext == ".mtok") return read_image_tensor(path);
  throw IoError("unsupported image file '" + path.string() + "' (expected .png or .mtok)");
}

Tensor<float> synthetic_image(std::size_t resolution, std::uint64_t seed) {
  nn::Rng rng(seed);
  constexpr int kWaves = 3;
  struct Wave {
    double fx, fy, phase, amp;
  };
  Wave waves[3][kWaves];
  for (auto& channel : waves) {
    for (auto& w : channel) {
      w.fx = 0.5 + 1.5 * rng.uniform();
      w.fy = 0.5 + 1.5 * rng.uniform();
      w.phase = 2 * std::numbers::pi * rng.uniform();
      w.amp = 0.5 + 0.5 * rng.uniform();
    }
  }
  std::vector<float> data(resolution * resolution * 3);
  for (std::size_t y = 0; y < resolution; ++y) {
    for (std::size_t x = 0; x < resolution; ++x) {
      const double u = static_cast<double>(x) / resolution, v = static_cast<double>(y) / resolution;
      for (int c = 0; c < 3; ++c) {
        double s = 0, norm = 0;
        for (const auto& w : waves[c]) {
          s += w.amp * std::sin(2 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
          norm += w.amp;
        }
        data[(y * resolution + x) * 3 + c] = static_cast<float>(0.5 + 0.4 * s / norm);
      }
    }
  }
  return Tensor<float>::from({resolution, resolution, 3}, std::move(data));
}

ImageSet load_images(const std::filesystem::path& dir, const std::string& format, std::size_t resolution,
                     std::size_t count, std::uint64_t seed) {
  ImageSet set;
  if (format == "synthetic") {
    if (count == 0) throw ValidationError("data: synthetic count must be positive");
    for (std::size_t i = 0; i < count; ++i) {
      set.keys.push_back("synthetic_" + std::to_string(i));
      set.images.push_back(synthetic_image(resolution, seed + i));
    }
    return set;
  }
  std::string ext;
  if (format == "png") {
    ext = ".png";
  } else if (format == "tensor") {
    ext = ".mtok";
  } else {
    throw ValidationError("data: unknown format '" + format + "' (expected png, tensor or synthetic)");
  }
  if (!std::filesystem::is_directory(dir)) throw IoError("data directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ext) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("data directory '" + dir.string() + "' has no " + ext + " files");
  for (const auto& f : files) {
    Tensor<float> image = read_image(f);
    if (image.dim(0) != resolution || image.dim(1) != resolution) {
      throw ValidationError("image '" + f.string() + "' is " + nn::shape_str(image.shape()) + ", expected " +
                            std::to_string(resolution) + "x" + std::to_string(resolution));
    }
    set.keys.push_back(f.stem().string());
    set.images.push_back(std::move(image));
  }
  return set;
}

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) {
    throw ValidationError("psnr: shapes " + nn::shape_str(a.shape()) + " and " + nn::shape_str(b.shape()));
  }
  auto va = a.values(), vb = b.values();
  double se = 0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    const double d = static_cast<double>(va[i]) - vb[i];
    se += d * d;
  }
  if (se == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / (se / static_cast<double>(va.size())));
}

double ssim(const Tensor<float>& a, const Tensor<float>& b) {
  check_rgb(a, "ssim");
  if (a.shape() != b.shape()) {
    throw ValidationError("ssim: shapes " + nn::shape_str(a.shape()) + " and " + nn::shape_str(b.shape()));
  }
  const std::size_t h = a.dim(0), w = a.dim(1);
  std::size_t win = std::min<std::size_t>({11, h, w});
  if (win % 2 == 0) --win;
  const double sigma = 1.5;
  std::vector<double> g(win);
  double gs = 0;
  for (std::size_t i = 0; i < win; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(win / 2);
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    gs += g[i];
  }
  for (auto& x : g) x /= gs;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto va = a.values(), vb = b.values();
  double total = 0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y + win <= h; ++y) {
      for (std::size_t x = 0; x + win <= w; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t i = 0; i < win; ++i) {
          for (std::size_t j = 0; j < win; ++j) {
            const double k = g[i] * g[j];
            const std::size_t idx = ((y + i) * w + (x + j)) * 3 + c;
            const double pa = va[idx], pb = vb[idx];
            ma += k * pa;
            mb += k * pb;
            saa += k * pa * pa;
            sbb += k * pb * pb;
            sab += k * pa * pb;
          }
        }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        ++n;
      }
    }
  }
  return total / static_cast<double>(n);
}

}  // namespace mingtok::io
