#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spcl/graph.hpp"

namespace spcl {

/// Concentration κ and the trainable temperature τ = exp(theta_tau),
/// kept inside [tau_min, tau_max].
struct LossParams {
  double kappa = 1.0;
  double theta_tau = 2.302585092994046;  // ln 10
  double tau_min = 1.0;
  double tau_max = 100.0;

  double tau() const;
  void validate() const;
  // Projects theta_tau back into [ln tau_min, ln tau_max].
  void clamp_theta();
  friend bool operator==(const LossParams&, const LossParams&) = default;
};

struct BatchLossReport {
  Var total;                       // mean of per_anchor, differentiable
  std::vector<double> per_anchor;  // 2N entries
  double mean_pos_sim = 0.0;
  double mean_neg_sim = 0.0;
  double tau_value = 0.0;

  double total_value() const { return total.value().item(); }
};

/// 0.5·(1+c)/(1+(1−c)·κ) with c = cos(z1, z2). Inputs must be unit vectors
/// (within 1e-4); the cosine is clamped to [−1, 1].
double tsp_similarity(std::span<const float> z1, std::span<const float> z2, double kappa);

// The same map applied to a given cosine value.
double tsp_of_cosine(double cosine, double kappa);

/// S[i][j] = T-SP similarity of rows i and j of unit-row Z.
Var similarity_matrix(Var unit_rows, double kappa);

/// Contrastive objective over 2N unit rows. For anchor i,
///   L_i = −log( exp(s(i,partner)·τ) / Σ_{j≠i} exp(s(i,j)·τ) ),
/// τ = clamp(exp(theta), tau_min, tau_max); total is the mean over anchors.
/// `theta` is a single-element Var holding theta_tau.
BatchLossReport batch_loss(Var unit_rows, std::span<const std::size_t> partner, Var theta,
                           const LossParams& params);

/// partner[2k] = 2k+1 and vice versa: rows ordered (z1, z2) per image.
std::vector<std::size_t> adjacent_pairing(std::size_t images);

// ln(2N − 1): the loss value when every embedding is identical.
double collapse_loss(std::size_t images);

}  // namespace spcl
