#include "spcl/patching.hpp"

#include <cmath>

#include "spcl/error.hpp"

namespace spcl {

ImageGray::ImageGray(std::size_t h, std::size_t w, std::vector<float> px)
    : height(h), width(w), pixels(std::move(px)) {
  if (h == 0 || w == 0) throw DimensionError("image dimensions must be positive");
  if (pixels.size() != h * w) {
    throw DimensionError("image " + std::to_string(h) + "x" + std::to_string(w) + " needs " +
                         std::to_string(h * w) + " pixels, got " + std::to_string(pixels.size()));
  }
}

Tensor extract_patches(const ImageGray& img, std::size_t patch, PixelStandardization norm) {
  if (patch == 0 || img.height == 0 || img.height % patch != 0 || img.width % patch != 0) {
    throw ConfigError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                      " is not divisible by patch size " + std::to_string(patch));
  }
  if (!(norm.std > 0.0f)) throw ConfigError("pixel standardization std must be positive");
  const std::size_t gh = img.height / patch, gw = img.width / patch;
  Tensor out(Shape{gh * gw, patch * patch});
  const float inv = 1.0f / norm.std;
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      auto row = out.row(py * gw + px);
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          row[y * patch + x] = (img.at(py * patch + y, px * patch + x) - norm.mean) * inv;
    }
  }
  return out;
}

ImageGray assemble_patches(const Tensor& patches, std::size_t grid_h, std::size_t grid_w,
                           std::size_t patch) {
  if (patches.rows() != grid_h * grid_w || patches.cols() != patch * patch) {
    throw DimensionError("assemble_patches: shape " + to_string(patches.shape()) +
                         " does not match grid");
  }
  ImageGray img(grid_h * patch, grid_w * patch,
                std::vector<float>(grid_h * grid_w * patch * patch));
  for (std::size_t py = 0; py < grid_h; ++py)
    for (std::size_t px = 0; px < grid_w; ++px) {
      auto row = patches.row(py * grid_w + px);
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          img.pixels[(py * patch + y) * img.width + px * patch + x] = row[y * patch + x];
    }
  return img;
}

Tensor sincos_pos_embed(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0) {
    throw ConfigError("positional embedding dim must be a positive multiple of 4, got " +
                      std::to_string(dim));
  }
  const std::size_t half = dim / 2;
  Tensor out(Shape{grid_h * grid_w, dim});
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t c = 0; c < grid_w; ++c) {
      auto row = out.row(r * grid_w + c);
      for (std::size_t k = 0; k < half / 2; ++k) {
        const double omega = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(half));
        row[2 * k] = static_cast<float>(std::sin(static_cast<double>(r) * omega));
        row[2 * k + 1] = static_cast<float>(std::cos(static_cast<double>(r) * omega));
        row[half + 2 * k] = static_cast<float>(std::sin(static_cast<double>(c) * omega));
        row[half + 2 * k + 1] = static_cast<float>(std::cos(static_cast<double>(c) * omega));
      }
    }
  }
  return out;
}

TokenSequence embed_tokens(Var patches, Var proj, Var proj_bias, const Tensor& pos,
                           std::size_t grid_h, std::size_t grid_w) {
  const Tensor& pv = patches.value();
  if (pv.rows() != grid_h * grid_w) {
    throw DimensionError("embed_tokens: " + std::to_string(pv.rows()) + " patches for a " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
  if (pos.rows() != pv.rows() || pos.cols() != proj.value().cols()) {
    throw DimensionError("embed_tokens: positional table " + to_string(pos.shape()) +
                         " does not match projection " + to_string(proj.value().shape()));
  }
  Var projected = add_row(matmul(patches, proj), proj_bias);
  Var tokens = add(projected, patches.graph().constant(pos));
  return TokenSequence{tokens, grid_h, grid_w};
}

}  // namespace spcl
