#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "spcl/tensor.hpp"

namespace spcl {

class Graph;

/// Handle to a value recorded on a Graph. Cheap to copy; valid for the
/// lifetime of its graph.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  // Gradient accumulated by the last backward pass. Empty for constants and
  // for intermediates the pass did not reach.
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

  Graph& graph() const { return *graph_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

enum class Retain { no, yes };

/// Tape of executed differentiable operations.
///
/// Operations append nodes in execution order; backward replays them in
/// reverse. Leaf gradients accumulate across passes until the owner calls
/// zero_grad(); intermediate gradients are reset at the start of each pass.
/// Without Retain::yes a pass consumes the graph and further passes throw.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool trainable = true);
  Var constant(Tensor value);

  void backward(Var loss, Retain retain = Retain::no);
  void backward(Var output, const Tensor& seed, Retain retain = Retain::no);
  void zero_grad();

  bool consumed() const noexcept { return consumed_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  // Operations (non-leaf nodes) executed by the most recent backward pass.
  std::size_t last_pass_visits() const noexcept { return last_visits_; }

  // Used by operation implementations.
  Var record(Tensor value, std::vector<std::uint32_t> inputs, BackwardFn fn);
  const Tensor& value_of(std::uint32_t id) const { return nodes_[id].value; }
  const Tensor& grad_of(std::uint32_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  // Zero-initialized on first touch within a pass.
  Tensor& grad_slot(std::uint32_t id);

 private:
  friend class Var;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool leaf = false;
  };

  std::deque<Node> nodes_;
  bool consumed_ = false;
  std::size_t last_visits_ = 0;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All inputs must live on the same graph.

Var matmul(Var a, Var b);                 // a[m×k] · b[k×n]
Var matmul_nt(Var a, Var b);              // a[m×k] · b[n×k]ᵀ
Var add(Var a, Var b);                    // same shape
Var add_row(Var x, Var row);              // x[S×D] + row[D] broadcast
Var mul(Var a, Var b);                    // elementwise
Var scale(Var x, float s);
Var scale_by(Var x, Var s);               // s is a single-element tensor
Var sum(Var x);                           // → [1], accumulated in double
Var mean(Var x);
Var exp(Var x);
Var clamp(Var x, float lo, float hi);     // zero gradient outside [lo, hi]
Var gelu(Var x);                          // tanh approximation
Var layer_norm(Var x, Var gain, Var bias, float eps = 1e-6f);
Var softmax_rows(Var x);
Var l2_normalize_rows(Var x);
Var gather_rows(Var x, std::span<const std::size_t> rows);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);

// Elementwise T-distributed spherical similarity of a cosine value:
// 0.5·(1+c)/(1+(1−c)·κ), with c clamped to [−1, 1]. The clamp absorbs
// rounding drift, so the derivative is taken at the clamped point.
Var tsp_from_cosine(Var cosine, float kappa);

// Per-row contrastive negative log-likelihood over a square logit matrix:
// out[i] = log Σ_{j≠i} exp(l[i][j]) − l[i][partner[i]]. Computed in double.
Var contrastive_nll(Var logits, std::span<const std::size_t> partner);

// ---------------------------------------------------------------------------

/// Counts multiply-accumulates performed by matmul/matmul_nt forwards on the
/// current thread while alive. Nested counters each see the full count.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t count() const noexcept { return count_; }

 private:
  friend void tally_macs(std::uint64_t);
  std::uint64_t count_ = 0;
  MacCounter* previous_ = nullptr;
};

void tally_macs(std::uint64_t macs);

// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;   // index into params
  std::size_t worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

using ScalarObjective = std::function<Var(Graph&, std::span<const Var>)>;

/// Compares backward() gradients of a scalar objective against central
/// differences with step h, over every element of every parameter tensor.
/// Error per element is |analytic − numeric| / max(1, |numeric|).
GradCheckReport finite_diff_check(const ScalarObjective& f, std::vector<Tensor> params,
                                  float h = 1e-3f);

}  // namespace spcl
