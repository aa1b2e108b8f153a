#include "spcl/flops.hpp"

#include <cstdio>
#include <vector>

#include "spcl/error.hpp"
#include "spcl/graph.hpp"
#include "spcl/partition.hpp"

namespace spcl {

BlockCost block_cost(const EncoderConfig& cfg, std::uint64_t S) {
  const std::uint64_t D = cfg.dim, m = cfg.mlp_ratio;
  BlockCost c;
  c.attention = 3 * S * D * D  // qkv
                + S * D * D    // output projection
                + 2 * S * S * D;  // q·kᵀ and weights·v over all heads
  c.mlp = 2 * m * S * D * D;
  return c;
}

std::uint64_t patch_embed_cost(const EncoderConfig& cfg, std::uint64_t tokens) {
  return tokens * cfg.patch * cfg.patch * cfg.dim;
}

std::uint64_t encoder_forward_cost(const EncoderConfig& cfg, std::uint64_t seq_len) {
  if (seq_len == 0) throw ConfigError("encoder_forward_cost: sequence length must be >= 1");
  return cfg.depth * block_cost(cfg, seq_len).total() + patch_embed_cost(cfg, cfg.num_tokens());
}

CostReport spcl_step_cost(const EncoderConfig& cfg, double mask_ratio) {
  cfg.validate();
  CostReport r;
  r.num_tokens = cfg.num_tokens();
  const std::uint64_t half = view_size(cfg.num_tokens(), mask_ratio);
  r.branch_seq_len = half + 1;
  r.baseline_seq_len = r.num_tokens + 1;
  r.branch_block = block_cost(cfg, r.branch_seq_len);
  r.baseline_block = block_cost(cfg, r.baseline_seq_len);
  r.patch_embed = patch_embed_cost(cfg, 2 * half);
  r.branch_total = cfg.depth * r.branch_block.total();
  r.total = 2 * r.branch_total + r.patch_embed;
  r.baseline_total = encoder_forward_cost(cfg, r.baseline_seq_len);
  r.ratio = static_cast<double>(r.total) / static_cast<double>(r.baseline_total);
  return r;
}

std::uint64_t brute_force_count(const EncoderConfig& cfg, std::uint64_t seq_len) {
  cfg.validate();
  if (cfg.dim > 8 || cfg.depth > 2 || seq_len > 4 || seq_len == 0) {
    throw ConfigError("brute_force_count: only tiny configs (D<=8, depth<=2, 1<=S<=4) are instrumented");
  }
  if (seq_len > cfg.max_seq_len()) throw ConfigError("brute_force_count: S exceeds N+1");
  if (seq_len < 2) throw ConfigError("brute_force_count: S must be >= 2 ([CLS] plus one token)");
  CounterRng rng = make_stream(0, Stream::init);
  const EncoderParams params = init_params(cfg, rng);
  ImageGray img(cfg.image, cfg.image, std::vector<float>(cfg.image * cfg.image, 0.5f));

  MacCounter counter;
  Graph g;
  BoundEncoder enc = bind_encoder(g, cfg, params, false);
  TokenSequence tokens = tokenize(img, enc);
  std::vector<std::size_t> rows(seq_len - 1);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  forward_cls(gather_rows(tokens.tokens, rows), enc);
  return counter.count();
}

std::string format_cost_report(const CostReport& r, bool tsv) {
  struct Line {
    const char* key;
    double value;
    bool cost = true;
  };
  const std::vector<Line> lines = {
      {"num_tokens", static_cast<double>(r.num_tokens), false},
      {"branch_seq_len", static_cast<double>(r.branch_seq_len), false},
      {"baseline_seq_len", static_cast<double>(r.baseline_seq_len), false},
      {"branch_block_attention", static_cast<double>(r.branch_block.attention)},
      {"branch_block_mlp", static_cast<double>(r.branch_block.mlp)},
      {"baseline_block_attention", static_cast<double>(r.baseline_block.attention)},
      {"baseline_block_mlp", static_cast<double>(r.baseline_block.mlp)},
      {"patch_embed", static_cast<double>(r.patch_embed)},
      {"branch_total", static_cast<double>(r.branch_total)},
      {"total", static_cast<double>(r.total)},
      {"baseline_total", static_cast<double>(r.baseline_total)},
      {"ratio", r.ratio, false},
  };
  std::string out;
  char buf[128];
  for (const auto& l : lines) {
    const bool is_ratio = std::string(l.key) == "ratio";
    if (tsv) {
      std::snprintf(buf, sizeof buf, is_ratio ? "%s\t%.6f\n" : "%s\t%.0f\n", l.key, l.value);
    } else if (is_ratio) {
      std::snprintf(buf, sizeof buf, "%-26s %14.6f\n", l.key, l.value);
    } else if (!l.cost) {
      std::snprintf(buf, sizeof buf, "%-26s %14.0f\n", l.key, l.value);
    } else {
      std::snprintf(buf, sizeof buf, "%-26s %14.0f  (%.3f GFLOPs)\n", l.key, l.value, l.value / 1e9);
    }
    out += buf;
  }
  return out;
}

}  // namespace spcl
