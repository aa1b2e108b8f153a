#include "spcl/encoder.hpp"

#include <cmath>

#include "spcl/error.hpp"

namespace spcl {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("encoder config: " + m); };
  if (dim == 0 || heads == 0 || mlp_ratio == 0 || patch == 0 || image == 0) {
    fail("dim, heads, mlp_ratio, patch and image must be positive");
  }
  if (dim % heads != 0) fail("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  if (dim % 4 != 0) fail("dim " + std::to_string(dim) + " not divisible by 4");
  if (image % patch != 0) fail("image " + std::to_string(image) + " not divisible by patch " + std::to_string(patch));
  if (!(layer_norm_eps > 0.0f)) fail("layer_norm_eps must be positive");
  if (!(pixels.std > 0.0f)) fail("pixel_std must be positive");
}

std::vector<ParamRef> EncoderParams::refs() {
  std::vector<ParamRef> r;
  r.push_back({"patch_embed.weight", &patch_weight, true});
  r.push_back({"patch_embed.bias", &patch_bias, false});
  r.push_back({"cls", &cls, false});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    BlockParams& b = blocks[i];
    r.push_back({p + "ln1.gain", &b.ln1_gain, false});
    r.push_back({p + "ln1.bias", &b.ln1_bias, false});
    r.push_back({p + "attn.qkv.weight", &b.qkv_weight, true});
    r.push_back({p + "attn.qkv.bias", &b.qkv_bias, false});
    r.push_back({p + "attn.proj.weight", &b.proj_weight, true});
    r.push_back({p + "attn.proj.bias", &b.proj_bias, false});
    r.push_back({p + "ln2.gain", &b.ln2_gain, false});
    r.push_back({p + "ln2.bias", &b.ln2_bias, false});
    r.push_back({p + "mlp.fc1.weight", &b.fc1_weight, true});
    r.push_back({p + "mlp.fc1.bias", &b.fc1_bias, false});
    r.push_back({p + "mlp.fc2.weight", &b.fc2_weight, true});
    r.push_back({p + "mlp.fc2.bias", &b.fc2_bias, false});
  }
  r.push_back({"norm.gain", &norm_gain, false});
  r.push_back({"norm.bias", &norm_bias, false});
  return r;
}

std::vector<ConstParamRef> EncoderParams::refs() const {
  std::vector<ConstParamRef> out;
  for (auto& r : const_cast<EncoderParams*>(this)->refs()) out.push_back({r.name, r.tensor, r.decay});
  return out;
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& r : refs()) n += r.tensor->size();
  return n;
}

std::size_t encoder_parameter_count(const EncoderConfig& cfg) {
  const std::size_t D = cfg.dim, H = cfg.mlp_ratio * cfg.dim, P2 = cfg.patch * cfg.patch;
  const std::size_t per_block = 2 * D            // ln1
                                + D * 3 * D + 3 * D  // qkv
                                + D * D + D          // proj
                                + 2 * D              // ln2
                                + D * H + H          // fc1
                                + H * D + D;         // fc2
  return P2 * D + D + D + cfg.depth * per_block + 2 * D;
}

namespace {

Tensor trunc_normal(Shape shape, CounterRng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.truncated_normal(0.02));
  return t;
}

}  // namespace

EncoderParams init_params(const EncoderConfig& cfg, CounterRng& rng) {
  cfg.validate();
  const std::size_t D = cfg.dim, H = cfg.mlp_ratio * cfg.dim, P2 = cfg.patch * cfg.patch;
  EncoderParams p;
  p.patch_weight = trunc_normal({P2, D}, rng);
  p.patch_bias = Tensor({D});
  p.cls = trunc_normal({D}, rng);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    BlockParams b;
    b.ln1_gain = Tensor({D}, 1.0f);
    b.ln1_bias = Tensor({D});
    b.qkv_weight = trunc_normal({D, 3 * D}, rng);
    b.qkv_bias = Tensor({3 * D});
    b.proj_weight = trunc_normal({D, D}, rng);
    b.proj_bias = Tensor({D});
    b.ln2_gain = Tensor({D}, 1.0f);
    b.ln2_bias = Tensor({D});
    b.fc1_weight = trunc_normal({D, H}, rng);
    b.fc1_bias = Tensor({H});
    b.fc2_weight = trunc_normal({H, D}, rng);
    b.fc2_bias = Tensor({D});
    p.blocks.push_back(std::move(b));
  }
  p.norm_gain = Tensor({D}, 1.0f);
  p.norm_bias = Tensor({D});
  return p;
}

std::vector<Var> BoundEncoder::leaves() const {
  std::vector<Var> v{patch_weight, patch_bias, cls};
  for (const auto& b : blocks) {
    v.insert(v.end(), {b.ln1_gain, b.ln1_bias, b.qkv_weight, b.qkv_bias, b.proj_weight,
                       b.proj_bias, b.ln2_gain, b.ln2_bias, b.fc1_weight, b.fc1_bias,
                       b.fc2_weight, b.fc2_bias});
  }
  v.push_back(norm_gain);
  v.push_back(norm_bias);
  return v;
}

BoundEncoder bind_encoder(const EncoderConfig& cfg, std::span<const Var> leaves) {
  cfg.validate();
  const std::size_t expected = 5 + 12 * cfg.depth;
  if (leaves.size() != expected) {
    throw DimensionError("bind: expected " + std::to_string(expected) + " parameter tensors, got " +
                         std::to_string(leaves.size()));
  }
  BoundEncoder e;
  e.cfg = cfg;
  std::size_t k = 0;
  e.patch_weight = leaves[k++];
  e.patch_bias = leaves[k++];
  e.cls = leaves[k++];
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    BoundBlock b;
    for (Var* slot : {&b.ln1_gain, &b.ln1_bias, &b.qkv_weight, &b.qkv_bias, &b.proj_weight,
                      &b.proj_bias, &b.ln2_gain, &b.ln2_bias, &b.fc1_weight, &b.fc1_bias,
                      &b.fc2_weight, &b.fc2_bias}) {
      *slot = leaves[k++];
    }
    e.blocks.push_back(b);
  }
  e.norm_gain = leaves[k++];
  e.norm_bias = leaves[k++];
  const std::size_t P2 = cfg.patch * cfg.patch;
  if (e.patch_weight.value().rows() != P2 || e.patch_weight.value().cols() != cfg.dim) {
    throw DimensionError("bind: patch projection " + to_string(e.patch_weight.shape()) +
                         " does not match config");
  }
  e.pos = sincos_pos_embed(cfg.grid(), cfg.grid(), cfg.dim);
  return e;
}

BoundEncoder bind_encoder(Graph& g, const EncoderConfig& cfg, const EncoderParams& params, bool trainable) {
  std::vector<Var> leaves;
  for (const auto& r : params.refs()) leaves.push_back(g.leaf(*r.tensor, trainable));
  return bind_encoder(cfg, leaves);
}

TokenSequence tokenize(const ImageGray& img, const BoundEncoder& enc) {
  const auto& cfg = enc.cfg;
  if (img.height != cfg.image || img.width != cfg.image) {
    throw ConfigError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                      " does not match configured side " + std::to_string(cfg.image));
  }
  Graph& g = enc.patch_weight.graph();
  Var patches = g.constant(extract_patches(img, cfg.patch, cfg.pixels));
  return embed_tokens(patches, enc.patch_weight, enc.patch_bias, enc.pos, cfg.grid(), cfg.grid());
}

namespace {

Var attention(Var x, const BoundBlock& b, const EncoderConfig& cfg) {
  const std::size_t D = cfg.dim, hd = cfg.head_dim();
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(hd));
  Var qkv = add_row(matmul(x, b.qkv_weight), b.qkv_bias);
  std::vector<Var> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Var q = slice_cols(qkv, h * hd, hd);
    Var k = slice_cols(qkv, D + h * hd, hd);
    Var v = slice_cols(qkv, 2 * D + h * hd, hd);
    Var weights = softmax_rows(scale(matmul_nt(q, k), scale_factor));
    heads.push_back(matmul(weights, v));
  }
  Var merged = heads.size() == 1 ? heads[0] : concat_cols(heads);
  return add_row(matmul(merged, b.proj_weight), b.proj_bias);
}

Var mlp(Var x, const BoundBlock& b) {
  Var hidden = gelu(add_row(matmul(x, b.fc1_weight), b.fc1_bias));
  return add_row(matmul(hidden, b.fc2_weight), b.fc2_bias);
}

}  // namespace

Var forward_cls(Var view, const BoundEncoder& enc) {
  const auto& cfg = enc.cfg;
  const Tensor& vv = view.value();
  if (vv.cols() != cfg.dim) {
    throw DimensionError("forward_cls: view width " + std::to_string(vv.cols()) +
                         " does not match dim " + std::to_string(cfg.dim));
  }
  if (vv.rows() + 1 > cfg.max_seq_len()) {
    throw ConfigError("forward_cls: sequence of " + std::to_string(vv.rows() + 1) +
                      " exceeds maximum " + std::to_string(cfg.max_seq_len()));
  }
  const Var parts[] = {enc.cls, view};
  Var x = concat_rows(parts);
  const float eps = cfg.layer_norm_eps;
  for (const auto& b : enc.blocks) {
    x = add(x, attention(layer_norm(x, b.ln1_gain, b.ln1_bias, eps), b, cfg));
    x = add(x, mlp(layer_norm(x, b.ln2_gain, b.ln2_bias, eps), b));
  }
  const std::size_t cls_row[] = {0};
  return layer_norm(gather_rows(x, cls_row), enc.norm_gain, enc.norm_bias, eps);
}

std::pair<Var, Var> forward_pair(const TokenSequence& tokens, const PartitionPlan& plan,
                                 const BoundEncoder& enc) {
  auto [view_a, view_b] = apply_partition(tokens, plan);
  Var z1 = forward_cls(view_a, enc);
  Var z2 = forward_cls(view_b, enc);
  return {z1, z2};
}

Var forward_full(const TokenSequence& tokens, const BoundEncoder& enc) {
  return forward_cls(tokens.tokens, enc);
}

}  // namespace spcl
