#pragma once

#include <cstddef>
#include <vector>

#include "spcl/graph.hpp"
#include "spcl/tensor.hpp"

namespace spcl {

/// Single-channel image, row-major, intensities in [0, 1].
struct ImageGray {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  ImageGray() = default;
  ImageGray(std::size_t h, std::size_t w, std::vector<float> px);

  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  friend bool operator==(const ImageGray&, const ImageGray&) = default;
};

/// Positioned token sequence E = patches·W + b + pos.
struct TokenSequence {
  Var tokens;  // [N×D]
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t count() const noexcept { return grid_h * grid_w; }
};

// Optional intensity standardization applied to patch values: (x − mean)/std.
struct PixelStandardization {
  float mean = 0.0f;
  float std = 1.0f;

  friend bool operator==(const PixelStandardization&, const PixelStandardization&) = default;
};

/// Row-major patch grid, row-major pixels inside each patch → [N × P²].
Tensor extract_patches(const ImageGray& img, std::size_t patch,
                       PixelStandardization norm = {});

/// Inverse of extract_patches (without standardization).
ImageGray assemble_patches(const Tensor& patches, std::size_t grid_h, std::size_t grid_w,
                           std::size_t patch);

/// Fixed 2D sin-cos embedding [N×D]. Channels [0, D/2) encode the grid row,
/// [D/2, D) the grid column; within a half, channel 2k is sin(pos·ω_k) and
/// 2k+1 is cos(pos·ω_k) with ω_k = 10000^(−2k/(D/2)).
Tensor sincos_pos_embed(std::size_t grid_h, std::size_t grid_w, std::size_t dim);

TokenSequence embed_tokens(Var patches, Var proj, Var proj_bias, const Tensor& pos,
                           std::size_t grid_h, std::size_t grid_w);

}  // namespace spcl
