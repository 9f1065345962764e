#include "camforge/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "camforge/ops.hpp"

namespace camforge {

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

std::size_t pgm_number(std::istream& in, const std::filesystem::path& path, const char* what) {
  const std::string tok = pgm_token(in);
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
    throw std::runtime_error(path.string() + ": bad PGM " + what);
  }
  return std::stoul(tok);
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  if (pgm_token(in) != "P5") throw std::runtime_error(path.string() + ": not a binary PGM (P5)");
  GrayImage img;
  img.width = pgm_number(in, path, "width");
  img.height = pgm_number(in, path, "height");
  const std::size_t maxval = pgm_number(in, path, "maxval");
  if (img.width == 0 || img.height == 0) throw std::runtime_error(path.string() + ": empty PGM");
  if (maxval == 0 || maxval > 255) throw std::runtime_error(path.string() + ": only 8-bit PGM is supported");
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw std::runtime_error(path.string() + ": truncated PGM payload");
  }
  if (maxval != 255) {
    for (auto& p : img.pixels) {
      p = static_cast<std::uint8_t>(std::lround(255.0 * std::min<std::size_t>(p, maxval) / maxval));
    }
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor normalize_pixels(const GrayImage& image) {
  std::vector<double> v(image.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(image.pixels[i]) / 255.0;
  return Tensor({1, image.height, image.width}, std::move(v));
}

GrayImage quantize(std::span<const double> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw std::invalid_argument("quantize: size mismatch");
  GrayImage img{height, width, std::vector<std::uint8_t>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::floor(std::clamp(values[i], 0.0, 1.0) * 255.0 + 0.5);
    img.pixels[i] = static_cast<std::uint8_t>(std::min(v, 255.0));
  }
  return img;
}

Tensor resize_image(const Tensor& image, std::size_t height, std::size_t width) {
  if (image.dim() != 3) throw std::invalid_argument("resize_image: expected C x H x W, got " + shape_str(image.shape()));
  if (image.size(1) == height && image.size(2) == width) return image.clone();
  NoGradGuard no_grad;
  return upsample_bilinear(image, height, width).detach();
}

}  // namespace camforge
