#include "spcl/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "spcl/error.hpp"

namespace spcl {

// ---------------------------------------------------------------------------
// Var / Graph

const Tensor& Var::value() const { return graph_->nodes_[id_].value; }
const Tensor& Var::grad() const { return graph_->nodes_[id_].grad; }
bool Var::requires_grad() const { return graph_->nodes_[id_].requires_grad; }

Var Graph::leaf(Tensor value, bool trainable) {
  Node n;
  n.grad = trainable ? Tensor(value.shape()) : Tensor();
  n.value = std::move(value);
  n.requires_grad = trainable;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) { return leaf(std::move(value), false); }

Var Graph::record(Tensor value, std::vector<std::uint32_t> inputs, BackwardFn fn) {
  if (consumed_) throw Error("graph already consumed by backward()");
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::uint32_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor& Graph::grad_slot(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::backward(Var loss, Retain retain) {
  if (loss.value().size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " +
                         to_string(loss.value().shape()));
  }
  backward(loss, Tensor(loss.value().shape(), 1.0f), retain);
}

void Graph::backward(Var output, const Tensor& seed, Retain retain) {
  if (output.graph_ != this) throw Error("backward(): output belongs to another graph");
  if (consumed_) throw Error("graph already consumed by backward()");
  if (seed.size() != output.value().size()) {
    throw DimensionError("backward seed " + to_string(seed.shape()) + " does not match output " +
                         to_string(output.value().shape()));
  }
  for (auto& n : nodes_) {
    if (!n.leaf) n.grad = Tensor();
  }
  last_visits_ = 0;
  Node& out = nodes_[output.id_];
  if (out.requires_grad) {
    Tensor& g = grad_slot(output.id_);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (std::uint32_t id = output.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.leaf || !n.backward || n.grad.empty()) continue;
      n.backward(*this, id);
      ++last_visits_;
    }
  }
  if (retain == Retain::no) {
    consumed_ = true;
    for (auto& n : nodes_) n.backward = nullptr;
  }
}

void Graph::zero_grad() {
  for (auto& n : nodes_) {
    if (n.leaf && n.requires_grad) n.grad.fill(0.0f);
  }
}

// ---------------------------------------------------------------------------
// MAC instrumentation

namespace {
thread_local MacCounter* active_counter = nullptr;
}

MacCounter::MacCounter() : previous_(active_counter) { active_counter = this; }
MacCounter::~MacCounter() { active_counter = previous_; }

void tally_macs(std::uint64_t macs) {
  for (MacCounter* c = active_counter; c != nullptr; c = c->previous_) c->count_ += macs;
}

// ---------------------------------------------------------------------------
// Kernels. All accumulate into `out`.

namespace {

// out[m×n] += a[m×k] · b[k×n]
void gemm_nn(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* orow = out + i * n;
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
void gemm_nt(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * k;
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * n + j] += acc;
    }
  }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
void gemm_tn(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    const float* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      float* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

Graph& same_graph(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid()) throw Error(std::string(op) + ": invalid operand");
  if (&a.graph() != &b.graph()) throw Error(std::string(op) + ": operands live on different graphs");
  return a.graph();
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) +
                       " and " + to_string(b.shape()));
}

Shape matrix_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) shape_error("matmul", av, bv);
  Tensor out(matrix_shape(m, n));
  gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  tally_macs(static_cast<std::uint64_t>(m) * k * n);
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph& g, std::uint32_t self) {
    const float* dc = g.grad_of(self).data().data();
    if (g.needs_grad(ia)) gemm_nt(dc, g.value_of(ib).data().data(), g.grad_slot(ia).data().data(), m, n, k);
    if (g.needs_grad(ib)) gemm_tn(g.value_of(ia).data().data(), dc, g.grad_slot(ib).data().data(), m, k, n);
  });
}

Var matmul_nt(Var a, Var b) {
  Graph& g = same_graph(a, b, "matmul_nt");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) shape_error("matmul_nt", av, bv);
  Tensor out(matrix_shape(m, n));
  gemm_nt(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  tally_macs(static_cast<std::uint64_t>(m) * k * n);
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph& g, std::uint32_t self) {
    const float* dc = g.grad_of(self).data().data();
    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
    if (g.needs_grad(ia)) gemm_nn(dc, g.value_of(ib).data().data(), g.grad_slot(ia).data().data(), m, n, k);
    if (g.needs_grad(ib)) gemm_tn(dc, g.value_of(ia).data().data(), g.grad_slot(ib).data().data(), m, n, k);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  Graph& g = same_graph(a, b, "add");
  if (!a.value().same_shape(b.value())) shape_error("add", a.value(), b.value());
  Tensor out = a.value();
  const auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    for (auto id : {ia, ib}) {
      if (!g.needs_grad(id)) continue;
      Tensor& d = g.grad_slot(id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
  });
}

Var add_row(Var x, Var row) {
  Graph& g = same_graph(x, row, "add_row");
  const Tensor& xv = x.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) shape_error("add_row", xv, rv);
  Tensor out = xv;
  const std::size_t S = xv.rows(), D = xv.cols();
  for (std::size_t r = 0; r < S; ++r)
    for (std::size_t c = 0; c < D; ++c) out[r * D + c] += rv[c];
  const auto ix = x.id(), ir = row.id();
  return g.record(std::move(out), {ix, ir}, [ix, ir, S, D](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    if (g.needs_grad(ix)) {
      Tensor& d = g.grad_slot(ix);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
    if (g.needs_grad(ir)) {
      Tensor& d = g.grad_slot(ir);
      for (std::size_t r = 0; r < S; ++r)
        for (std::size_t c = 0; c < D; ++c) d[c] += dy[r * D + c];
    }
  });
}

Var mul(Var a, Var b) {
  Graph& g = same_graph(a, b, "mul");
  if (!a.value().same_shape(b.value())) shape_error("mul", a.value(), b.value());
  Tensor out = a.value();
  const auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    if (g.needs_grad(ia)) {
      Tensor& d = g.grad_slot(ia);
      const Tensor& bv = g.value_of(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * bv[i];
    }
    if (g.needs_grad(ib)) {
      Tensor& d = g.grad_slot(ib);
      const Tensor& av = g.value_of(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * av[i];
    }
  });
}

Var scale(Var x, float s) {
  Graph& g = x.graph();
  Tensor out = x.value();
  for (auto& v : out.data()) v *= s;
  const auto ix = x.id();
  return g.record(std::move(out), {ix}, [ix, s](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    Tensor& d = g.grad_slot(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * s;
  });
}

Var scale_by(Var x, Var s) {
  Graph& g = same_graph(x, s, "scale_by");
  if (s.value().size() != 1) shape_error("scale_by", x.value(), s.value());
  const float sv = s.value()[0];
  Tensor out = x.value();
  for (auto& v : out.data()) v *= sv;
  const auto ix = x.id(), is = s.id();
  return g.record(std::move(out), {ix, is}, [ix, is](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& xv = g.value_of(ix);
    const float sv = g.value_of(is)[0];
    if (g.needs_grad(ix)) {
      Tensor& d = g.grad_slot(ix);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * sv;
    }
    if (g.needs_grad(is)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(dy[i]) * xv[i];
      g.grad_slot(is)[0] += static_cast<float>(acc);
    }
  });
}

Var sum(Var x) {
  Graph& g = x.graph();
  double acc = 0.0;
  for (float v : x.value().data()) acc += v;
  const auto ix = x.id();
  return g.record(Tensor::scalar(static_cast<float>(acc)), {ix}, [ix](Graph& g, std::uint32_t self) {
    const float dy = g.grad_of(self)[0];
    for (auto& v : g.grad_slot(ix).data()) v += dy;
  });
}

Var mean(Var x) {
  Graph& g = x.graph();
  double acc = 0.0;
  for (float v : x.value().data()) acc += v;
  const std::size_t n = x.value().size();
  const auto ix = x.id();
  return g.record(Tensor::scalar(static_cast<float>(acc / static_cast<double>(n))), {ix},
                  [ix, n](Graph& g, std::uint32_t self) {
                    const float dy = g.grad_of(self)[0] / static_cast<float>(n);
                    for (auto& v : g.grad_slot(ix).data()) v += dy;
                  });
}

Var exp(Var x) {
  Graph& g = x.graph();
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::exp(v);
  const auto ix = x.id();
  return g.record(std::move(out), {ix}, [ix](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& y = g.value_of(self);
    Tensor& d = g.grad_slot(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * y[i];
  });
}

Var clamp(Var x, float lo, float hi) {
  Graph& g = x.graph();
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::clamp(v, lo, hi);
  const auto ix = x.id();
  return g.record(std::move(out), {ix}, [ix, lo, hi](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& xv = g.value_of(ix);
    Tensor& d = g.grad_slot(ix);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) d[i] += dy[i];
  });
}

Var gelu(Var x) {
  Graph& g = x.graph();
  constexpr float a = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float b = 0.044715f;
  Tensor out = x.value();
  for (auto& v : out.data()) v = 0.5f * v * (1.0f + std::tanh(a * (v + b * v * v * v)));
  const auto ix = x.id();
  return g.record(std::move(out), {ix}, [ix](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& xv = g.value_of(ix);
    Tensor& d = g.grad_slot(ix);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const float v = xv[i];
      const float t = std::tanh(a * (v + b * v * v * v));
      const float dt = (1.0f - t * t) * a * (1.0f + 3.0f * b * v * v);
      d[i] += dy[i] * (0.5f * (1.0f + t) + 0.5f * v * dt);
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

Var layer_norm(Var x, Var gain, Var bias, float eps) {
  Graph& g = same_graph(x, gain, "layer_norm");
  same_graph(x, bias, "layer_norm");
  if (!(eps > 0.0f)) throw ConfigError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t S = xv.rows(), D = xv.cols();
  if (gain.value().size() != D) shape_error("layer_norm", xv, gain.value());
  if (bias.value().size() != D) shape_error("layer_norm", xv, bias.value());

  Tensor out(xv.shape());
  std::vector<float> xhat(S * D), rstd(S);
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < S; ++r) {
    const float* row = xv.data().data() + r * D;
    double mu = 0.0;
    for (std::size_t c = 0; c < D; ++c) mu += row[c];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t c = 0; c < D; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(D);
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    rstd[r] = rs;
    for (std::size_t c = 0; c < D; ++c) {
      const float h = static_cast<float>(row[c] - mu) * rs;
      xhat[r * D + c] = h;
      out[r * D + c] = h * gv[c] + bv[c];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return g.record(std::move(out), {ix, ig, ib},
                  [ix, ig, ib, S, D, xhat = std::move(xhat), rstd = std::move(rstd)](
                      Graph& g, std::uint32_t self) {
                    const Tensor& dy = g.grad_of(self);
                    if (g.needs_grad(ig)) {
                      Tensor& d = g.grad_slot(ig);
                      for (std::size_t i = 0; i < S * D; ++i) d[i % D] += dy[i] * xhat[i];
                    }
                    if (g.needs_grad(ib)) {
                      Tensor& d = g.grad_slot(ib);
                      for (std::size_t i = 0; i < S * D; ++i) d[i % D] += dy[i];
                    }
                    if (!g.needs_grad(ix)) return;
                    const Tensor& gv = g.value_of(ig);
                    Tensor& dx = g.grad_slot(ix);
                    std::vector<float> dh(D);
                    for (std::size_t r = 0; r < S; ++r) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t c = 0; c < D; ++c) {
                        dh[c] = dy[r * D + c] * gv[c];
                        m1 += dh[c];
                        m2 += static_cast<double>(dh[c]) * xhat[r * D + c];
                      }
                      m1 /= static_cast<double>(D);
                      m2 /= static_cast<double>(D);
                      for (std::size_t c = 0; c < D; ++c) {
                        dx[r * D + c] += rstd[r] * static_cast<float>(dh[c] - m1 -
                                                                      xhat[r * D + c] * m2);
                      }
                    }
                  });
}

Var softmax_rows(Var x) {
  Graph& g = x.graph();
  const Tensor& xv = x.value();
  const std::size_t S = xv.rows(), C = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < S; ++r) {
    const auto in = xv.row(r);
    auto o = out.row(r);
    const float mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      o[c] = std::exp(in[c] - mx);
      z += o[c];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (auto& v : o) v *= inv;
  }
  const auto ix = x.id();
  return g.record(std::move(out), {ix}, [ix, S, C](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& y = g.value_of(self);
    Tensor& d = g.grad_slot(ix);
    for (std::size_t r = 0; r < S; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += static_cast<double>(dy[r * C + c]) * y[r * C + c];
      for (std::size_t c = 0; c < C; ++c)
        d[r * C + c] += y[r * C + c] * (dy[r * C + c] - static_cast<float>(dot));
    }
  });
}

Var l2_normalize_rows(Var x) {
  Graph& g = x.graph();
  const Tensor& xv = x.value();
  const std::size_t S = xv.rows(), D = xv.cols();
  Tensor out(xv.shape());
  std::vector<float> inv_norm(S);
  for (std::size_t r = 0; r < S; ++r) {
    double ss = 0.0;
    for (float v : xv.row(r)) ss += static_cast<double>(v) * v;
    const double norm = std::sqrt(ss);
    if (norm < 1e-12) {
      throw NumericalError("l2_normalize_rows: row " + std::to_string(r) +
                           " has near-zero norm (degenerate embedding)");
    }
    inv_norm[r] = static_cast<float>(1.0 / norm);
    for (std::size_t c = 0; c < D; ++c) out[r * D + c] = xv[r * D + c] * inv_norm[r];
  }
  const auto ix = x.id();
  return g.record(std::move(out), {ix},
                  [ix, S, D, inv_norm = std::move(inv_norm)](Graph& g, std::uint32_t self) {
                    const Tensor& dy = g.grad_of(self);
                    const Tensor& y = g.value_of(self);
                    Tensor& d = g.grad_slot(ix);
                    for (std::size_t r = 0; r < S; ++r) {
                      double dot = 0.0;
                      for (std::size_t c = 0; c < D; ++c)
                        dot += static_cast<double>(dy[r * D + c]) * y[r * D + c];
                      for (std::size_t c = 0; c < D; ++c) {
                        d[r * D + c] += inv_norm[r] * (dy[r * D + c] -
                                                       y[r * D + c] * static_cast<float>(dot));
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// Structural

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  Graph& g = x.graph();
  const Tensor& xv = x.value();
  const std::size_t D = xv.cols();
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor out(matrix_shape(rows.size(), D));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(rows[i]) +
                           " out of range for " + to_string(xv.shape()));
    }
    std::copy_n(xv.row(rows[i]).begin(), D, out.row(i).begin());
  }
  const auto ix = x.id();
  return g.record(std::move(out), {ix},
                  [ix, D, idx = std::vector<std::size_t>(rows.begin(), rows.end())](
                      Graph& g, std::uint32_t self) {
                    const Tensor& dy = g.grad_of(self);
                    Tensor& d = g.grad_slot(ix);
                    for (std::size_t i = 0; i < idx.size(); ++i)
                      for (std::size_t c = 0; c < D; ++c) d[idx[i] * D + c] += dy[i * D + c];
                  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  Graph& g = parts[0].graph();
  const std::size_t D = parts[0].value().cols();
  std::size_t total = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    same_graph(parts[0], p, "concat_rows");
    if (p.value().cols() != D) shape_error("concat_rows", parts[0].value(), p.value());
    ids.push_back(p.id());
    offsets.push_back(total);
    total += p.value().rows();
  }
  Tensor out(matrix_shape(total, D));
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto src = parts[i].value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[i] * D));
  }
  return g.record(std::move(out), ids, [ids, offsets, D](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!g.needs_grad(ids[i])) continue;
      Tensor& d = g.grad_slot(ids[i]);
      const float* src = dy.data().data() + offsets[i] * D;
      for (std::size_t j = 0; j < d.size(); ++j) d[j] += src[j];
    }
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  Graph& g = x.graph();
  const Tensor& xv = x.value();
  const std::size_t S = xv.rows(), D = xv.cols();
  if (count == 0 || begin + count > D) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " +
                         to_string(xv.shape()));
  }
  Tensor out(matrix_shape(S, count));
  for (std::size_t r = 0; r < S; ++r)
    std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(r * D + begin), count,
                out.row(r).begin());
  const auto ix = x.id();
  return g.record(std::move(out), {ix}, [ix, S, D, begin, count](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    Tensor& d = g.grad_slot(ix);
    for (std::size_t r = 0; r < S; ++r)
      for (std::size_t c = 0; c < count; ++c) d[r * D + begin + c] += dy[r * count + c];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  Graph& g = parts[0].graph();
  const std::size_t S = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets, widths;
  for (const Var& p : parts) {
    same_graph(parts[0], p, "concat_cols");
    if (p.value().rows() != S) shape_error("concat_cols", parts[0].value(), p.value());
    ids.push_back(p.id());
    offsets.push_back(total);
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out(matrix_shape(S, total));
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& pv = parts[i].value();
    for (std::size_t r = 0; r < S; ++r)
      std::copy_n(pv.row(r).begin(), widths[i],
                  out.data().begin() + static_cast<std::ptrdiff_t>(r * total + offsets[i]));
  }
  return g.record(std::move(out), ids,
                  [ids, offsets, widths, S, total](Graph& g, std::uint32_t self) {
                    const Tensor& dy = g.grad_of(self);
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      if (!g.needs_grad(ids[i])) continue;
                      Tensor& d = g.grad_slot(ids[i]);
                      for (std::size_t r = 0; r < S; ++r)
                        for (std::size_t c = 0; c < widths[i]; ++c)
                          d[r * widths[i] + c] += dy[r * total + offsets[i] + c];
                    }
                  });
}

// ---------------------------------------------------------------------------
// Contrastive objective pieces

Var tsp_from_cosine(Var cosine, float kappa) {
  if (!(kappa > 0.0f)) throw ConfigError("tsp_from_cosine: kappa must be positive");
  Graph& g = cosine.graph();
  Tensor out = cosine.value();
  for (auto& v : out.data()) {
    const float c = std::clamp(v, -1.0f, 1.0f);
    v = 0.5f * (1.0f + c) / (1.0f + (1.0f - c) * kappa);
  }
  const auto ic = cosine.id();
  return g.record(std::move(out), {ic}, [ic, kappa](Graph& g, std::uint32_t self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& cv = g.value_of(ic);
    Tensor& d = g.grad_slot(ic);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const float c = std::clamp(cv[i], -1.0f, 1.0f);
      const float den = 1.0f + (1.0f - c) * kappa;
      d[i] += dy[i] * 0.5f * (1.0f + 2.0f * kappa) / (den * den);
    }
  });
}

Var contrastive_nll(Var logits, std::span<const std::size_t> partner) {
  Graph& g = logits.graph();
  const Tensor& lv = logits.value();
  const std::size_t M = lv.rows();
  if (lv.cols() != M) throw DimensionError("contrastive_nll: logits must be square, got " + to_string(lv.shape()));
  if (M < 2) throw DimensionError("contrastive_nll: need at least two rows");
  if (partner.size() != M) throw DimensionError("contrastive_nll: partner map length mismatch");

  Tensor out(Shape{M});
  // Softmax over j≠i, kept for the backward pass.
  std::vector<double> prob(M * M, 0.0);
  for (std::size_t i = 0; i < M; ++i) {
    if (partner[i] >= M || partner[i] == i) {
      throw DimensionError("contrastive_nll: invalid partner for row " + std::to_string(i));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < M; ++j)
      if (j != i) mx = std::max(mx, static_cast<double>(lv.at(i, j)));
    double z = 0.0;
    for (std::size_t j = 0; j < M; ++j) {
      if (j == i) continue;
      prob[i * M + j] = std::exp(static_cast<double>(lv.at(i, j)) - mx);
      z += prob[i * M + j];
    }
    for (std::size_t j = 0; j < M; ++j) prob[i * M + j] /= z;
    out[i] = static_cast<float>(mx + std::log(z) - static_cast<double>(lv.at(i, partner[i])));
  }
  const auto il = logits.id();
  return g.record(std::move(out), {il},
                  [il, M, prob = std::move(prob),
                   pt = std::vector<std::size_t>(partner.begin(), partner.end())](
                      Graph& g, std::uint32_t self) {
                    const Tensor& dy = g.grad_of(self);
                    Tensor& d = g.grad_slot(il);
                    for (std::size_t i = 0; i < M; ++i) {
                      for (std::size_t j = 0; j < M; ++j) {
                        if (j == i) continue;
                        double v = prob[i * M + j] - (j == pt[i] ? 1.0 : 0.0);
                        d[i * M + j] += static_cast<float>(dy[i] * v);
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------

GradCheckReport finite_diff_check(const ScalarObjective& f, std::vector<Tensor> params, float h) {
  if (!(h > 0.0f)) throw ConfigError("finite_diff_check: step h must be positive");

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(g.leaf(p));
    Var loss = f(g, leaves);
    if (!loss.value().all_finite()) throw NumericalError("finite_diff_check: non-finite objective");
    g.backward(loss);
    for (const auto& l : leaves) analytic.push_back(l.grad());
  }

  auto evaluate = [&]() {
    Graph g;
    std::vector<Var> consts;
    for (const auto& p : params) consts.push_back(g.constant(p));
    const double v = f(g, consts).value().item();
    if (!std::isfinite(v)) throw NumericalError("finite_diff_check: non-finite objective");
    return v;
  };

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t e = 0; e < params[p].size(); ++e) {
      const float saved = params[p][e];
      params[p][e] = saved + h;
      const double plus = evaluate();
      params[p][e] = saved - h;
      const double minus = evaluate();
      params[p][e] = saved;
      // Use the realized float step so the quotient matches what was evaluated.
      const double step = static_cast<double>(saved + h) - static_cast<double>(saved - h);
      const double numeric = (plus - minus) / step;
      const double a = analytic[p][e];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      ++report.checked;
      if (err > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = err;
        report.worst_param = p;
        report.worst_element = e;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace spcl
