#pragma once

#include <cstdint>
#include <string>

#include "spcl/encoder.hpp"

namespace spcl {

// Cost model conventions: one multiply-accumulate counts as one FLOP;
// layer norms, softmax, GELU, bias adds and residual adds are not counted.

struct BlockCost {
  std::uint64_t attention = 0;  // QKV, output projection, scores, weighted sum
  std::uint64_t mlp = 0;
  std::uint64_t total() const noexcept { return attention + mlp; }
};

/// Per-block cost at sequence length S (including [CLS]):
/// attention 4·S·D² + 2·S²·D, MLP 2·m·S·D².
BlockCost block_cost(const EncoderConfig& cfg, std::uint64_t seq_len);

std::uint64_t patch_embed_cost(const EncoderConfig& cfg, std::uint64_t tokens);

/// depth × block_cost(S) + patch embedding of all N patches.
std::uint64_t encoder_forward_cost(const EncoderConfig& cfg, std::uint64_t seq_len);

struct CostReport {
  std::uint64_t num_tokens = 0;
  std::uint64_t branch_seq_len = 0;    // n_even/2 + 1
  std::uint64_t baseline_seq_len = 0;  // N + 1
  BlockCost branch_block;              // per block, one branch
  BlockCost baseline_block;
  std::uint64_t patch_embed = 0;       // visible tokens, embedded once
  std::uint64_t branch_total = 0;      // depth × branch_block
  std::uint64_t total = 0;             // 2 × branch_total + patch_embed
  std::uint64_t baseline_total = 0;    // encoder_forward_cost(N + 1)
  double ratio = 0.0;                  // total / baseline_total
};

/// Two-branch pre-training forward cost at mask ratio r versus a single
/// full-sequence forward.
CostReport spcl_step_cost(const EncoderConfig& cfg, double mask_ratio);

/// Runs a real forward (patch embedding of one image, then forward_cls on
/// S−1 tokens) and counts the multiply-accumulates the matmuls perform.
/// Limited to D ≤ 8, depth ≤ 2, 2 ≤ S ≤ 4.
std::uint64_t brute_force_count(const EncoderConfig& cfg, std::uint64_t seq_len);

std::string format_cost_report(const CostReport& r, bool tab_separated = false);

}  // namespace spcl
