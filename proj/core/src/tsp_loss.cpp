#include "spcl/tsp_loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spcl/error.hpp"

namespace spcl {

double LossParams::tau() const { return std::clamp(std::exp(theta_tau), tau_min, tau_max); }

void LossParams::validate() const {
  if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
  if (!(tau_min > 0.0 && tau_min <= tau_max)) throw ConfigError("need 0 < tau_min <= tau_max");
  if (!std::isfinite(theta_tau)) throw ConfigError("theta_tau must be finite");
}

void LossParams::clamp_theta() {
  theta_tau = std::clamp(theta_tau, std::log(tau_min), std::log(tau_max));
}

namespace {

void check_unit(std::span<const float> z, const char* which) {
  double ss = 0.0;
  for (float v : z) ss += static_cast<double>(v) * v;
  if (std::abs(std::sqrt(ss) - 1.0) > 1e-4) {
    throw NumericalError(std::string("tsp_similarity: ") + which + " is not a unit vector (norm " +
                         std::to_string(std::sqrt(ss)) + ")");
  }
}

void check_unit_rows(const Tensor& z) {
  for (std::size_t r = 0; r < z.rows(); ++r) check_unit(z.row(r), "row");
}

// Cosine → T-SP → τ-scaled logits → per-anchor NLL as one node, evaluated in
// double. Logits reach τ·1 ≈ 10 where a float ulp is ~1e-6, which would
// otherwise dominate the objective's rounding noise.
Var fused_tsp_nll(Var unit_rows, Var theta, std::span<const std::size_t> partner,
                  const LossParams& params) {
  Graph& g = unit_rows.graph();
  if (&theta.graph() != &g) throw Error("batch_loss: theta lives on a different graph");
  const Tensor& z = unit_rows.value();
  const std::size_t M = z.rows(), D = z.cols();
  const double kappa = params.kappa;
  const double raw_tau = std::exp(static_cast<double>(theta.value()[0]));
  const double tau = std::clamp(raw_tau, params.tau_min, params.tau_max);
  const bool tau_free = raw_tau >= params.tau_min && raw_tau <= params.tau_max;

  std::vector<double> cosine(M * M), sim(M * M), prob(M * M, 0.0);
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = i; j < M; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < D; ++k) dot += static_cast<double>(z.at(i, k)) * z.at(j, k);
      cosine[i * M + j] = cosine[j * M + i] = dot;
      sim[i * M + j] = sim[j * M + i] = tsp_of_cosine(dot, kappa);
    }
  }
  Tensor out(Shape{M});
  for (std::size_t i = 0; i < M; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < M; ++j)
      if (j != i) mx = std::max(mx, tau * sim[i * M + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < M; ++j) {
      if (j == i) continue;
      prob[i * M + j] = std::exp(tau * sim[i * M + j] - mx);
      sum += prob[i * M + j];
    }
    for (std::size_t j = 0; j < M; ++j) prob[i * M + j] /= sum;
    out[i] = static_cast<float>(mx + std::log(sum) - tau * sim[i * M + partner[i]]);
  }

  const auto iz = unit_rows.id(), it = theta.id();
  return g.record(
      std::move(out), {iz, it},
      [iz, it, M, D, kappa, tau, tau_free, cosine = std::move(cosine), sim = std::move(sim),
       prob = std::move(prob), pt = std::vector<std::size_t>(partner.begin(), partner.end())](
          Graph& g, std::uint32_t self) {
        const Tensor& dy = g.grad_of(self);
        // dL/dlogit_ij = dy_i (p_ij − [j = partner(i)])
        std::vector<double> dsim(M * M, 0.0);
        double dtau = 0.0;
        for (std::size_t i = 0; i < M; ++i) {
          for (std::size_t j = 0; j < M; ++j) {
            if (j == i) continue;
            const double dl = static_cast<double>(dy[i]) * (prob[i * M + j] - (j == pt[i] ? 1.0 : 0.0));
            dsim[i * M + j] = dl * tau;
            dtau += dl * sim[i * M + j];
          }
        }
        if (g.needs_grad(iz)) {
          const Tensor& z = g.value_of(iz);
          std::vector<double> dz(M * D, 0.0);
          for (std::size_t i = 0; i < M; ++i) {
            for (std::size_t j = 0; j < M; ++j) {
              if (j == i) continue;
              const double c = std::clamp(cosine[i * M + j], -1.0, 1.0);
              const double den = 1.0 + (1.0 - c) * kappa;
              const double dc = dsim[i * M + j] * 0.5 * (1.0 + 2.0 * kappa) / (den * den);
              for (std::size_t k = 0; k < D; ++k) {
                dz[i * D + k] += dc * z.at(j, k);
                dz[j * D + k] += dc * z.at(i, k);
              }
            }
          }
          Tensor& d = g.grad_slot(iz);
          for (std::size_t e = 0; e < M * D; ++e) d[e] += static_cast<float>(dz[e]);
        }
        if (tau_free && g.needs_grad(it)) g.grad_slot(it)[0] += static_cast<float>(dtau * tau);
      });
}

}  // namespace

double tsp_of_cosine(double cosine, double kappa) {
  if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
  const double c = std::clamp(cosine, -1.0, 1.0);
  return 0.5 * (1.0 + c) / (1.0 + (1.0 - c) * kappa);
}

double tsp_similarity(std::span<const float> z1, std::span<const float> z2, double kappa) {
  if (z1.size() != z2.size()) throw DimensionError("tsp_similarity: length mismatch");
  check_unit(z1, "z1");
  check_unit(z2, "z2");
  double dot = 0.0;
  for (std::size_t i = 0; i < z1.size(); ++i) dot += static_cast<double>(z1[i]) * z2[i];
  return tsp_of_cosine(dot, kappa);
}

Var similarity_matrix(Var unit_rows, double kappa) {
  check_unit_rows(unit_rows.value());
  return tsp_from_cosine(matmul_nt(unit_rows, unit_rows), static_cast<float>(kappa));
}

BatchLossReport batch_loss(Var unit_rows, std::span<const std::size_t> partner, Var theta,
                           const LossParams& params) {
  params.validate();
  const std::size_t M = unit_rows.value().rows();
  if (M < 2 || M % 2 != 0) {
    throw DimensionError("batch_loss: need 2N >= 2 rows, got " + std::to_string(M));
  }
  if (partner.size() != M) throw DimensionError("batch_loss: pairing length mismatch");
  for (std::size_t i = 0; i < M; ++i) {
    if (partner[i] >= M || partner[i] == i || partner[partner[i]] != i) {
      throw DimensionError("batch_loss: pairing is not a perfect matching at row " +
                           std::to_string(i));
    }
  }
  if (theta.value().size() != 1) throw DimensionError("batch_loss: theta must be a scalar");

  check_unit_rows(unit_rows.value());
  Var per_anchor = fused_tsp_nll(unit_rows, theta, partner, params);

  BatchLossReport report;
  report.total = mean(per_anchor);
  report.tau_value = std::clamp(std::exp(static_cast<double>(theta.value()[0])), params.tau_min, params.tau_max);
  report.per_anchor.assign(per_anchor.value().data().begin(), per_anchor.value().data().end());
  const Tensor& z = unit_rows.value();
  double pos = 0.0, neg = 0.0;
  std::size_t neg_count = 0;
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < M; ++j) {
      if (j == i) continue;
      const double s = tsp_similarity(z.row(i), z.row(j), params.kappa);
      if (j == partner[i]) {
        pos += s;
      } else {
        neg += s;
        ++neg_count;
      }
    }
  }
  report.mean_pos_sim = pos / static_cast<double>(M);
  report.mean_neg_sim = neg_count ? neg / static_cast<double>(neg_count) : 0.0;
  return report;
}

std::vector<std::size_t> adjacent_pairing(std::size_t images) {
  std::vector<std::size_t> p(2 * images);
  for (std::size_t k = 0; k < images; ++k) {
    p[2 * k] = 2 * k + 1;
    p[2 * k + 1] = 2 * k;
  }
  return p;
}

double collapse_loss(std::size_t images) {
  return std::log(static_cast<double>(2 * images - 1));
}

}  // namespace spcl
