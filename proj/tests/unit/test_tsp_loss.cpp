#include <doctest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "spcl/error.hpp"
#include "spcl/tsp_loss.hpp"

using namespace spcl;
using spcl::test::random_unit_rows;

namespace {

LossParams params_with_tau(double tau, double kappa = 1.0) {
  LossParams p;
  p.kappa = kappa;
  p.theta_tau = std::log(tau);
  return p;
}

BatchLossReport run(const Tensor& z, const LossParams& p, Graph& g) {
  return batch_loss(g.constant(z), adjacent_pairing(z.rows() / 2), g.constant(Tensor::scalar(static_cast<float>(p.theta_tau))), p);
}

// Scalar re-evaluation of the per-anchor loss without the tensor stack.
std::vector<double> reference_loss(const Tensor& z, double kappa, double tau) {
  const std::size_t M = z.rows();
  std::vector<double> out(M);
  auto sim = [&](std::size_t i, std::size_t j) {
    double c = 0;
    for (std::size_t k = 0; k < z.cols(); ++k) c += static_cast<double>(z.at(i, k)) * z.at(j, k);
    c = std::clamp(c, -1.0, 1.0);
    return 0.5 * (1 + c) / (1 + (1 - c) * kappa);
  };
  for (std::size_t i = 0; i < M; ++i) {
    const std::size_t partner = i ^ 1u;
    double denom = 0;
    for (std::size_t j = 0; j < M; ++j)
      if (j != i) denom += std::exp(tau * sim(i, j));
    out[i] = -std::log(std::exp(tau * sim(i, partner)) / denom);
  }
  return out;
}

}  // namespace

TEST_CASE("T-SP similarity closed-form values") {
  const auto e0 = std::vector<float>{1, 0};
  const auto e1 = std::vector<float>{0, 1};
  const auto m0 = std::vector<float>{-1, 0};
  for (double k : {0.1, 1.0, 10.0}) {
    CHECK(std::abs(tsp_similarity(e0, e0, k) - 1.0) < 1e-12);
    CHECK(std::abs(tsp_similarity(e0, m0, k)) < 1e-12);
  }
  CHECK(tsp_similarity(e0, e1, 1.0) == doctest::Approx(0.25));
  CHECK(tsp_of_cosine(0.5, 2.0) == doctest::Approx(0.375));
  CHECK(tsp_of_cosine(1.5, 1.0) == 1.0);  // clamped
  CHECK_THROWS_AS(tsp_similarity(std::vector<float>{2, 0}, e0, 1.0), NumericalError);
  CHECK_THROWS_AS(tsp_similarity(e0, std::vector<float>{1, 0, 0}, 1.0), DimensionError);
  CHECK_THROWS_AS(tsp_of_cosine(0.0, 0.0), ConfigError);
}

TEST_CASE("T-SP is bounded and monotone in the cosine") {
  for (double k : {0.01, 0.5, 1.0, 7.0}) {
    double prev = -1.0;
    for (int i = 0; i <= 400; ++i) {
      const double s = tsp_of_cosine(-1.0 + i / 200.0, k);
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
      CHECK(s > prev);
      prev = s;
    }
  }
}

TEST_CASE("similarity matrix") {
  Graph g;
  const Tensor eye = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const Tensor s = similarity_matrix(g.constant(eye), 1.0).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(s.at(i, j) == doctest::Approx(i == j ? 1.0 : 0.25));
  const Tensor same = Tensor::matrix({{0.6f, 0.8f}, {0.6f, 0.8f}});
  for (float v : similarity_matrix(g.constant(same), 3.0).value().data()) CHECK(v == doctest::Approx(1.0));

  const Tensor z = random_unit_rows(6, 8, 3);
  const Tensor m = similarity_matrix(g.constant(z), 2.0).value();
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(m.at(i, j) - tsp_similarity(z.row(i), z.row(j), 2.0)) < 1e-6);
}

TEST_CASE("single image batch has zero loss") {
  const Tensor z = random_unit_rows(2, 5, 4);
  Graph g;
  Var rows = g.leaf(z);
  const LossParams p = params_with_tau(7.0, 3.0);
  auto rep = batch_loss(rows, adjacent_pairing(1), g.leaf(Tensor::scalar(static_cast<float>(p.theta_tau))), p);
  CHECK(std::abs(rep.total_value()) < 1e-7);
  g.backward(rep.total);
  for (float v : rows.grad().data()) CHECK(v == 0.0f);
}

TEST_CASE("collapse point equals ln(2N-1)") {
  for (double tau : {1.0, 10.0, 55.0}) {
    for (double kappa : {0.3, 1.0, 4.0}) {
      Tensor z(Shape{4, 3});
      for (std::size_t r = 0; r < 4; ++r) z.at(r, 1) = 1.0f;
      Graph g;
      auto rep = run(z, params_with_tau(tau, kappa), g);
      CHECK(std::abs(rep.total_value() - std::log(3.0)) < 1e-6);
      for (double v : rep.per_anchor) CHECK(std::abs(v - std::log(3.0)) < 1e-6);
    }
  }
  CHECK(collapse_loss(2) == doctest::Approx(std::log(3.0)));
  CHECK(collapse_loss(32) == doctest::Approx(std::log(63.0)));
}

TEST_CASE("orthogonal negatives, identical positives") {
  // Rows: image 0 views = e0, image 1 views = e1.
  const Tensor z = Tensor::matrix({{1, 0}, {1, 0}, {0, 1}, {0, 1}});
  Graph g;
  auto rep = run(z, params_with_tau(10.0), g);
  const double expected = std::log(1.0 + 2.0 * std::exp(-7.5));
  CHECK(expected == doctest::Approx(1.1056e-3).epsilon(1e-3));
  for (double v : rep.per_anchor) CHECK(std::abs(v - expected) < 1e-6);
  CHECK(std::abs(rep.total_value() - expected) < 1e-6);
  CHECK(rep.mean_pos_sim == doctest::Approx(1.0));
  CHECK(rep.mean_neg_sim == doctest::Approx(0.25));
  CHECK(rep.tau_value == doctest::Approx(10.0));
}

TEST_CASE("batch loss matches the scalar reference and its bounds") {
  CounterRng meta(17);
  for (int t = 0; t < 100; ++t) {
    const std::size_t N = 2 + meta.below(7), D = 4 + meta.below(29);
    const double tau = 1.0 + 99.0 * meta.uniform(), kappa = 0.1 + 5.0 * meta.uniform();
    const Tensor z = random_unit_rows(2 * N, D, 1000 + t);
    Graph g;
    auto rep = run(z, params_with_tau(tau, kappa), g);
    const auto ref = reference_loss(z, kappa, std::clamp(tau, 1.0, 100.0));
    for (std::size_t i = 0; i < 2 * N; ++i) {
      CHECK(std::abs(rep.per_anchor[i] - ref[i]) < 1e-4 * std::max(1.0, ref[i]));
      CHECK(rep.per_anchor[i] >= 0.0);
      CHECK(rep.per_anchor[i] <= rep.tau_value + std::log(2.0 * N - 1) + 1e-6);
    }
  }
}

TEST_CASE("swapping the two views of every image leaves the loss unchanged") {
  const Tensor z = random_unit_rows(8, 6, 21);
  Tensor swapped = z;
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t c = 0; c < 6; ++c) std::swap(swapped.at(2 * k, c), swapped.at(2 * k + 1, c));
  }
  Graph g;
  const LossParams p = params_with_tau(10.0);
  CHECK(std::abs(run(z, p, g).total_value() - run(swapped, p, g).total_value()) < 1e-6);
}

TEST_CASE("loss gradient against finite differences, including theta") {
  const Tensor z = random_unit_rows(6, 5, 31);
  LossParams p = params_with_tau(5.0, 1.5);
  auto rep = finite_diff_check(
      [&](Graph&, std::span<const Var> v) {
        return batch_loss(l2_normalize_rows(v[0]), adjacent_pairing(3), v[1], p).total;
      },
      {z, Tensor::scalar(static_cast<float>(p.theta_tau))});
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("tau is clamped and theta gradient vanishes outside the range") {
  LossParams p;
  p.theta_tau = std::log(500.0);
  CHECK(p.tau() == 100.0);
  p.clamp_theta();
  CHECK(p.theta_tau == doctest::Approx(std::log(100.0)));
  p.theta_tau = -3.0;
  CHECK(p.tau() == 1.0);

  const Tensor z = random_unit_rows(4, 3, 41);
  Graph g;
  Var th = g.leaf(Tensor::scalar(6.0f));  // e^6 > 100
  auto rep = batch_loss(g.constant(z), adjacent_pairing(2), th, p);
  CHECK(rep.tau_value == 100.0);
  g.backward(rep.total);
  CHECK(th.grad()[0] == 0.0f);
}

TEST_CASE("batch loss input validation") {
  Graph g;
  const LossParams p;
  Var th = g.constant(Tensor::scalar(2.0f));
  const Tensor z = random_unit_rows(4, 3, 51);
  CHECK_THROWS_AS(batch_loss(g.constant(random_unit_rows(3, 3, 1)), std::vector<std::size_t>{1, 0, 2}, th, p),
                  DimensionError);
  CHECK_THROWS_AS(batch_loss(g.constant(z), std::vector<std::size_t>{1, 0, 3, 3}, th, p), DimensionError);
  CHECK_THROWS_AS(batch_loss(g.constant(z), std::vector<std::size_t>{1, 2, 3, 0}, th, p), DimensionError);
  CHECK_THROWS_AS(batch_loss(g.constant(spcl::test::random_tensor({4, 3}, 2, 3.0)), adjacent_pairing(2), th, p),
                  NumericalError);
  LossParams bad;
  bad.kappa = 0.0;
  CHECK_THROWS_AS(batch_loss(g.constant(z), adjacent_pairing(2), th, bad), ConfigError);
}
