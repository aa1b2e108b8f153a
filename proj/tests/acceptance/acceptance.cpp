// Acceptance gate: one PASS/FAIL line per criterion on stdout, details on
// stderr. Usage: spcl_acceptance [criterion ...]  (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "spcl/dataio.hpp"
#include "spcl/encoder.hpp"
#include "spcl/flops.hpp"
#include "spcl/partition.hpp"
#include "spcl/probes.hpp"
#include "spcl/rng.hpp"
#include "spcl/trainer.hpp"
#include "spcl/tsp_loss.hpp"

using namespace spcl;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kTspEndpointTol = 1e-7;
constexpr double kTspLimitTol = 1e-8;
constexpr double kSingleImageTol = 1e-7;
constexpr double kCollapseTol = 1e-6;
constexpr double kOrthogonalTol = 1e-6;
constexpr double kGradRelTol = 1e-3;
constexpr float kGradStep = 1e-3f;
constexpr double kCoverageSigmas = 3.0;
constexpr double kBranchRatioTol = 1e-9;
constexpr double kPermutationTol = 1e-5;
constexpr double kVitBAnchor = 17.5e9, kVitBAnchorTol = 0.03;
constexpr double kTwoBranchReference = 6.1e9, kTwoBranchTol = 0.25;
constexpr double kProbeFloor = 0.85, kProbeMargin = 0.05;
constexpr double kResumeTol = 1e-6;

// Peak learning rate for the training check; see README "Training sanity".
constexpr double kDeskLr = 1e-3;

struct Outcome {
  bool pass = true;
  std::string detail;
};

void note(const char* fmt, auto... args) {
  std::fprintf(stderr, "    ");
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

Outcome fail(std::string why) { return {false, std::move(why)}; }

Tensor unit_rows(std::size_t rows, std::size_t cols, CounterRng& rng) {
  Tensor t({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (auto& v : t.row(r)) {
      v = static_cast<float>(rng.normal());
      ss += static_cast<double>(v) * v;
    }
    for (auto& v : t.row(r)) v = static_cast<float>(v / std::sqrt(ss));
  }
  return t;
}

struct LossValues {
  double total;
  std::vector<double> per_anchor;
  double tau;
};

LossValues loss_of(const Tensor& z, double kappa, double tau) {
  LossParams p;
  p.kappa = kappa;
  p.theta_tau = std::log(tau);
  Graph g;
  const auto rep = batch_loss(g.constant(z), adjacent_pairing(z.rows() / 2),
                              g.constant(Tensor::scalar(static_cast<float>(p.theta_tau))), p);
  return {rep.total_value(), rep.per_anchor, rep.tau_value};
}

// ---------------------------------------------------------------------------

Outcome ac1() {
  Outcome o;
  const std::vector<float> e{1, 0}, m{-1, 0};
  for (double k : {0.1, 1.0, 10.0}) {
    if (std::abs(tsp_similarity(e, e, k) - 1.0) > kTspEndpointTol) o = fail("s(c=1) != 1");
    if (std::abs(tsp_similarity(e, m, k)) > kTspEndpointTol) o = fail("s(c=-1) != 0");
  }
  double worst = 0.0, prev = -1.0;
  bool monotone = true;
  for (int i = 0; i <= 200; ++i) {
    const double c = -1.0 + i / 100.0;
    worst = std::max(worst, std::abs(tsp_of_cosine(c, 1e-9) - 0.5 * (1.0 + c)));
    const double s = tsp_of_cosine(c, 1.0);
    monotone = monotone && s > prev;
    prev = s;
  }
  for (double k : {0.1, 10.0}) {
    double p = -1.0;
    for (int i = 0; i <= 200; ++i) {
      const double s = tsp_of_cosine(-1.0 + i / 100.0, k);
      monotone = monotone && s > p;
      p = s;
    }
  }
  note("max |s(c, 1e-9) - (1+c)/2| = %.3g over 201 cosines", worst);
  if (worst > kTspLimitTol) o = fail("small-kappa limit off");
  if (!monotone) o = fail("not strictly increasing in c");
  return o;
}

Outcome ac2() {
  Outcome o;
  CounterRng rng(21);
  const Tensor single = unit_rows(2, 6, rng);
  const double l1 = loss_of(single, 2.0, 7.0).total;
  note("N=1 loss %.3g", l1);
  if (std::abs(l1) > kSingleImageTol) o = fail("N=1 loss not 0");

  double worst = 0.0;
  for (double kappa : {0.1, 1.0, 10.0})
    for (double tau : {1.0, 10.0, 100.0}) {
      Tensor same({4, 5});
      for (std::size_t r = 0; r < 4; ++r) same.at(r, 2) = 1.0f;
      worst = std::max(worst, std::abs(loss_of(same, kappa, tau).total - std::log(3.0)));
    }
  note("max |collapse - ln 3| = %.3g", worst);
  if (worst > kCollapseTol) o = fail("collapse value off");

  // Identical positives, orthogonal negatives: s+ = 1, s- = 1/4, so every
  // anchor loses log(1 + 2·exp(-τ·3/4)).
  const Tensor ortho = Tensor::matrix({{1, 0}, {1, 0}, {0, 1}, {0, 1}});
  const double got = loss_of(ortho, 1.0, 10.0).total;
  const double want = std::log1p(2.0 * std::exp(-7.5));
  note("orthogonal case %.9g vs %.9g", got, want);
  if (std::abs(got - want) > kOrthogonalTol) o = fail("orthogonal case off");
  return o;
}

Outcome ac3() {
  CounterRng rng(33);
  std::size_t batches = 0, anchors = 0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t N = 2 + rng.below(7), D = 4 + rng.below(29);
    const double tau = std::exp(std::log(1.0) + rng.uniform() * std::log(100.0));
    const double kappa = 0.1 + 9.9 * rng.uniform();
    const Tensor z = unit_rows(2 * N, D, rng);
    const auto rep = loss_of(z, kappa, tau);
    const double upper = rep.tau + std::log(2.0 * static_cast<double>(N) - 1.0);
    for (double l : rep.per_anchor) {
      if (!(l >= 0.0 && l <= upper)) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "anchor loss %.6g outside [0, %.6g]", l, upper);
        return fail(buf);
      }
      ++anchors;
    }
    ++batches;
  }
  note("%zu batches, %zu anchors in bounds", batches, anchors);
  return {};
}

Outcome ac4() {
  EncoderConfig cfg;
  cfg.depth = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.patch = 4;
  cfg.image = 16;
  TrainConfig tc;
  tc.seed = 3;
  const TrainState st = init_state(cfg, tc);
  SyntheticConfig sc;
  sc.height = sc.width = 16;
  const std::vector<ImageGray> imgs = {synthetic_image(sc, 0, 0), synthetic_image(sc, 1, 1)};
  const std::vector<PartitionPlan> plans = {plan_for(3, 0, 0, 16, 0.6), plan_for(3, 0, 1, 16, 0.6)};
  std::vector<Tensor> params;
  for (const auto& r : st.params.refs()) params.push_back(*r.tensor);
  params.push_back(Tensor::scalar(static_cast<float>(st.loss.theta_tau)));
  const LossParams lp = st.loss;
  auto f = [&](Graph&, std::span<const Var> v) {
    const BoundEncoder enc = bind_encoder(cfg, v.first(v.size() - 1));
    return build_objective(enc, v.back(), lp, imgs, plans).total;
  };
  const auto rep = finite_diff_check(f, params, kGradStep);
  note("max relative error %.3g over %zu elements (worst tensor %zu)", rep.max_rel_error, rep.checked,
       rep.worst_param);
  if (rep.checked != encoder_parameter_count(cfg) + 1) return fail("not every parameter was checked");
  if (!(rep.max_rel_error < kGradRelTol)) return fail("gradient mismatch");
  return {};
}

Outcome ac5() {
  CounterRng rng(55);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t N = 4 + rng.below(1021);
    const double r = 0.9 * rng.uniform();
    if (visible_count(N, r) < 2) continue;
    CounterRng plan_rng(rng.next_u64());
    const PartitionPlan p = sample_partition(N, r, plan_rng);
    std::set<std::size_t> vis(p.visible.begin(), p.visible.end()), a(p.group_a.begin(), p.group_a.end());
    bool ok = p.group_a.size() == p.group_b.size() && p.group_a.size() == view_size(N, r) &&
              vis.size() == p.visible.size() && a.size() == p.group_a.size();
    for (auto i : p.group_a) ok = ok && vis.count(i) == 1;
    for (auto i : p.group_b) ok = ok && vis.count(i) == 1 && a.count(i) == 0;
    for (auto i : p.visible) ok = ok && i < N;
    if (!ok) return fail("invariant violated at N=" + std::to_string(N));
  }
  const std::size_t trials = 10000;
  const auto h = coverage_histogram(16, 0.6, trials, 5);
  const double p = 3.0 / 16.0, sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(trials));
  double worst = 0.0;
  for (double f : h) worst = std::max(worst, std::abs(f - p) / sigma);
  note("1000 plans valid; worst coverage deviation %.2f sigma", worst);
  if (h.size() != 16 || worst > kCoverageSigmas) return fail("coverage not uniform");
  return {};
}

Outcome ac6() {
  const double a = effective_branch_ratio(100, 0.3);
  const double b = effective_branch_ratio(1024, 0.6);
  note("(100, 0.3) -> %.17g; (1024, 0.6) -> %.17g", a, b);
  if (a != 0.65) return fail("(100, 0.3) is not exactly 0.65");
  if (std::abs(b - (1.0 - 204.0 / 1024.0)) > kBranchRatioTol) return fail("(1024, 0.6) off");
  return {};
}

Outcome ac7() {
  const EncoderConfig cfg;  // desk encoder
  CounterRng init = make_stream(7, Stream::init);
  const EncoderParams params = init_params(cfg, init);
  SyntheticConfig sc;
  const ImageGray img = synthetic_image(sc, 3, 1);
  CounterRng rng(77);
  float worst = 0.0f;
  {
    Graph g;
    const BoundEncoder enc = bind_encoder(g, cfg, params, false);
    const TokenSequence tokens = tokenize(img, enc);
    const Tensor base = forward_full(tokens, enc).value();
    std::vector<std::size_t> order(cfg.num_tokens());
    for (int t = 0; t < 20; ++t) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      const Tensor out = forward_cls(gather_rows(tokens.tokens, order), enc).value();
      worst = std::max(worst, max_abs_diff(base, out));
    }
  }
  TrainConfig tc;
  const TrainState st = init_state(cfg, tc);
  const std::size_t count = trainable_parameter_count(st);
  const std::size_t expected = encoder_parameter_count(cfg) + 1;
  note("permutation deviation %.3g; trainable parameters %zu (one encoder + tau = %zu)",
       static_cast<double>(worst), count, expected);
  if (!(worst <= kPermutationTol)) return fail("not permutation invariant");
  if (count != expected || st.opt.m.size() != st.params.refs().size() + 1) return fail("extra trainable state");
  return {};
}

Outcome ac8() {
  std::size_t configs = 0;
  for (std::size_t depth : {1u, 2u})
    for (std::size_t dim : {4u, 8u})
      for (std::size_t heads : {1u, 2u, 4u})
        for (std::uint64_t S = 2; S <= 4; ++S) {
          if (dim % heads != 0) continue;
          EncoderConfig c;
          c.depth = depth;
          c.dim = dim;
          c.heads = heads;
          c.patch = 2;
          c.image = 4;
          const std::uint64_t closed = depth * block_cost(c, S).total() + patch_embed_cost(c, c.num_tokens());
          if (closed != brute_force_count(c, S)) return fail("closed form differs from instrumented count");
          ++configs;
        }
  EncoderConfig vb;
  vb.depth = 12;
  vb.dim = 768;
  vb.heads = 12;
  vb.patch = 16;
  vb.image = 224;
  const double full = static_cast<double>(encoder_forward_cost(vb, 197));
  const CostReport r = spcl_step_cost(vb, 0.6);
  note("%zu tiny configs exact; ViT-B S=197 %.4g; two-branch %.4g (ratio %.4f)", configs, full,
       static_cast<double>(r.total), r.ratio);
  if (std::abs(full - kVitBAnchor) / kVitBAnchor > kVitBAnchorTol) return fail("ViT-B anchor off");
  if (std::abs(static_cast<double>(r.total) - kTwoBranchReference) / kTwoBranchReference > kTwoBranchTol)
    return fail("two-branch total off");
  if (!(r.total < r.baseline_total)) return fail("two-branch not below baseline");
  return {};
}

Outcome ac9() {
  SyntheticConfig sc;
  sc.seed = 0;
  std::vector<ImageGray> tr, te;
  std::vector<int> ltr, lte;
  for (std::size_t i = 0; i < 1000; ++i) {
    const int l = synthetic_label(sc, i);
    (i < 800 ? tr : te).push_back(synthetic_image(sc, i, l));
    (i < 800 ? ltr : lte).push_back(l);
  }
  auto probe = [&](const TrainState& s) {
    return linear_probe(embed_dataset(tr, ltr, s.encoder, s.params), embed_dataset(te, lte, s.encoder, s.params))
        .accuracy;
  };
  int passed = 0;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    TrainConfig tc;
    tc.seed = seed;
    tc.lr_peak = kDeskLr;
    const TrainState init = init_state(EncoderConfig{}, tc);
    const double before = probe(init);
    const PretrainResult r = pretrain(tr, init);
    const double after = probe(r.state);
    const bool ok = after >= kProbeFloor && after - before >= kProbeMargin;
    passed += ok;
    note("seed %llu: random-init probe %.3f, trained probe %.3f, final loss %.4f (collapse %.4f)%s -> %s",
         static_cast<unsigned long long>(seed), before, after, r.metrics.back().loss, collapse_loss(tc.batch_size),
         r.collapse_warned ? ", collapse warning raised" : "", ok ? "ok" : "miss");
  }
  if (passed < 2) return fail(std::to_string(passed) + " of 3 seeds met the probe target");
  return {true, std::to_string(passed) + " of 3 seeds"};
}

Outcome ac10() {
  const fs::path root = fs::temp_directory_path() / "spcl_acceptance_ac10";
  fs::remove_all(root);
  SyntheticConfig sc;
  std::vector<ImageGray> data;
  for (std::size_t i = 0; i < 64; ++i) data.push_back(synthetic_image(sc, i, synthetic_label(sc, i)));
  TrainConfig tc;
  tc.epochs = 10;
  tc.seed = 10;
  tc.checkpoint_every = 5;
  const TrainState init = init_state(EncoderConfig{}, tc);

  auto run = [&](const fs::path& dir, std::optional<std::uint64_t> stop, const TrainState& from) {
    PretrainOptions o;
    o.out_dir = dir;
    o.stop_at_step = stop;
    return pretrain(data, from, o);
  };
  const auto a = run(root / "a", 10, init);
  const auto b = run(root / "b", 10, init);
  Outcome o;
  if (a.metrics.size() != 10 || read_file(root / "a" / "metrics.tsv") != read_file(root / "b" / "metrics.tsv"))
    o = fail("first 10 steps not bit-identical");

  const auto full = run(root / "full", std::nullopt, init);
  const auto head = run(root / "part", 7, init);
  const TrainState mid = load_checkpoint(root / "part" / "checkpoint-last.spcl");
  const auto tail = run(root / "part", std::nullopt, mid);
  double worst = 0.0;
  if (tail.metrics.size() + 7 != full.metrics.size()) o = fail("resumed run has the wrong length");
  for (std::size_t i = 0; i < tail.metrics.size() && i + 7 < full.metrics.size(); ++i)
    worst = std::max(worst, std::abs(tail.metrics[i].loss - full.metrics[i + 7].loss));
  if (!(worst <= kResumeTol)) o = fail("resume diverged");

  const std::string bytes = read_file(root / "full" / "checkpoint-last.spcl");
  save_checkpoint(root / "copy.spcl", load_checkpoint(root / "full" / "checkpoint-last.spcl"));
  const bool identical = read_file(root / "copy.spcl") == bytes;
  if (!identical) o = fail("checkpoint did not round-trip byte-identically");
  note("%zu steps; resume max |dloss| %.3g; checkpoint %zu bytes, round trip %s", full.metrics.size(), worst,
       bytes.size(), identical ? "identical" : "differs");
  (void)head;
  fs::remove_all(root);
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "T-SP similarity exactness", 1, ac1},
      {2, "loss exactness", 1, ac2},
      {3, "loss bounds", 10, ac3},
      {4, "gradient fidelity", 60, ac4},
      {5, "partition invariants", 30, ac5},
      {6, "dual-ratio arithmetic", 1, ac6},
      {7, "encoder structure", 30, ac7},
      {8, "FLOPs model", 5, ac8},
      {9, "training sanity", 15 * 60, ac9},
      {10, "determinism and persistence", 5 * 60, ac10},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    std::fprintf(stderr, "[%d] %s\n", c.id, c.name);
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.pass && secs > c.budget_s) o = fail("over time budget");
    std::printf("%s AC%d %s (%.2fs / %.0fs)%s%s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, secs, c.budget_s,
                o.detail.empty() ? "" : ": ", o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
