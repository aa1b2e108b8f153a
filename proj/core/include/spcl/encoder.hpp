#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "spcl/graph.hpp"
#include "spcl/partition.hpp"
#include "spcl/patching.hpp"
#include "spcl/rng.hpp"

namespace spcl {

struct EncoderConfig {
  std::size_t depth = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t patch = 8;
  std::size_t image = 64;  // square side in pixels
  float layer_norm_eps = 1e-6f;
  PixelStandardization pixels;

  std::size_t grid() const noexcept { return image / patch; }
  std::size_t num_tokens() const noexcept { return grid() * grid(); }
  // [CLS] plus every patch token.
  std::size_t max_seq_len() const noexcept { return num_tokens() + 1; }
  std::size_t head_dim() const noexcept { return dim / heads; }

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor qkv_weight, qkv_bias;    // D×3D, 3D
  Tensor proj_weight, proj_bias;  // D×D, D
  Tensor ln2_gain, ln2_bias;
  Tensor fc1_weight, fc1_bias;    // D×mD, mD
  Tensor fc2_weight, fc2_bias;    // mD×D, D

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

struct ParamRef {
  std::string name;
  Tensor* tensor;
  bool decay;  // only weight matrices receive weight decay
};

struct ConstParamRef {
  std::string name;
  const Tensor* tensor;
  bool decay;
};

/// The single shared parameter set of the encoder.
struct EncoderParams {
  Tensor patch_weight, patch_bias;  // P²×D, D
  Tensor cls;                       // D
  std::vector<BlockParams> blocks;
  Tensor norm_gain, norm_bias;

  // Canonical order used for binding, optimizer state and checkpoints.
  std::vector<ParamRef> refs();
  std::vector<ConstParamRef> refs() const;
  std::size_t parameter_count() const;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

/// Closed-form parameter count of one encoder for `cfg`.
std::size_t encoder_parameter_count(const EncoderConfig& cfg);

/// Truncated normal (std 0.02, ±2 std) for weights and [CLS]; zero biases;
/// unit layer-norm gains.
EncoderParams init_params(const EncoderConfig& cfg, CounterRng& rng);

struct BoundBlock {
  Var ln1_gain, ln1_bias, qkv_weight, qkv_bias, proj_weight, proj_bias;
  Var ln2_gain, ln2_bias, fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

/// Encoder parameters recorded as leaves of one graph.
struct BoundEncoder {
  EncoderConfig cfg;
  Var patch_weight, patch_bias, cls;
  std::vector<BoundBlock> blocks;
  Var norm_gain, norm_bias;
  Tensor pos;  // fixed positional table [N×D]

  std::vector<Var> leaves() const;
};

BoundEncoder bind_encoder(Graph& g, const EncoderConfig& cfg, const EncoderParams& params,
                  bool trainable = true);
// Vars in EncoderParams::refs() order.
BoundEncoder bind_encoder(const EncoderConfig& cfg, std::span<const Var> leaves);

TokenSequence tokenize(const ImageGray& img, const BoundEncoder& enc);

/// Runs [CLS] + view through the pre-norm blocks and returns the final
/// layer-normed [CLS] row [1×D]. The [CLS] carries no positional term.
Var forward_cls(Var view, const BoundEncoder& enc);

std::pair<Var, Var> forward_pair(const TokenSequence& tokens, const PartitionPlan& plan,
                                 const BoundEncoder& enc);

/// [CLS] embedding over every token; the frozen-feature path.
Var forward_full(const TokenSequence& tokens, const BoundEncoder& enc);

}  // namespace spcl
