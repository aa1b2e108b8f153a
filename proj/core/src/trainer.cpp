#include "spcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <memory>
#include <fstream>
#include <numbers>
#include <numeric>
#include <thread>

#include "spcl/dataio.hpp"
#include "spcl/error.hpp"

namespace spcl {

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (accum_steps == 0) fail("accum_steps must be >= 1");
  if (!(lr_peak >= 0.0)) fail("lr_peak must be non-negative");
  if (total_steps >= 0 && warmup_steps >= 0 && warmup_steps >= total_steps) {
    fail("warmup_steps must be smaller than total_steps");
  }
  if (total_steps == 0) fail("total_steps must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) fail("mask_ratio must lie in [0, 1)");
  if (!(kappa > 0.0)) fail("kappa must be positive");
  if (!(tau_min > 0.0 && tau_min <= tau_max)) fail("need 0 < tau_min <= tau_max");
  if (!(tau_init >= tau_min && tau_init <= tau_max)) fail("tau_init outside [tau_min, tau_max]");
  if (threads == 0) fail("threads must be >= 1");
}

std::size_t TrainConfig::steps_per_epoch(std::size_t dataset_size) const {
  const std::size_t eff = batch_size * accum_steps;
  return (dataset_size + eff - 1) / eff;
}

TrainConfig TrainConfig::resolved(std::size_t dataset_size) const {
  TrainConfig c = *this;
  if (c.total_steps < 0) {
    c.total_steps = static_cast<std::int64_t>(epochs * steps_per_epoch(dataset_size));
  }
  if (c.warmup_steps < 0) {
    c.warmup_steps = static_cast<std::int64_t>(std::floor(0.05 * static_cast<double>(c.total_steps)));
  }
  c.validate();
  return c;
}

LossParams TrainConfig::loss_params() const {
  LossParams p;
  p.kappa = kappa;
  p.theta_tau = std::log(tau_init);
  p.tau_min = tau_min;
  p.tau_max = tau_max;
  return p;
}

TrainState init_state(const EncoderConfig& encoder, const TrainConfig& train) {
  encoder.validate();
  train.validate();
  TrainState s;
  s.encoder = encoder;
  s.train = train;
  CounterRng init = make_stream(train.seed, Stream::init);
  s.params = init_params(encoder, init);
  s.loss = train.loss_params();
  for (const auto& r : s.params.refs()) {
    s.opt.m.emplace_back(r.tensor->shape());
    s.opt.v.emplace_back(r.tensor->shape());
  }
  s.opt.m.emplace_back(Shape{1});
  s.opt.v.emplace_back(Shape{1});
  s.streams = {
      {"init", init.key(), init.counter()},
      {"partition", derive_key(train.seed, Stream::partition), 0},
      {"shuffle", derive_key(train.seed, Stream::shuffle), 0},
  };
  return s;
}

std::size_t trainable_parameter_count(const TrainState& state) {
  return state.params.parameter_count() + 1;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (cfg.total_steps < 0 || cfg.warmup_steps < 0) {
    throw ConfigError("lr_at: schedule is not resolved (total/warmup steps unset)");
  }
  if (step < 0 || step > cfg.total_steps) {
    throw ConfigError("lr_at: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(cfg.total_steps) + "]");
  }
  const double w = static_cast<double>(cfg.warmup_steps);
  const double t = static_cast<double>(cfg.total_steps);
  const double s = static_cast<double>(step);
  if (step < cfg.warmup_steps) return cfg.lr_peak * s / w;
  const double progress = (s - w) / (t - w);
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_update(std::span<float> param, std::span<const float> grad, std::span<float> m,
                  std::span<float> v, double lr, const AdamWHyper& h, std::uint64_t step,
                  bool decay) {
  if (param.size() != grad.size() || param.size() != m.size() || param.size() != v.size()) {
    throw DimensionError("adamw_update: parameter, gradient and moment sizes differ");
  }
  if (!(lr >= 0.0)) throw ConfigError("adamw_update: negative learning rate");
  if (step == 0) throw ConfigError("adamw_update: step is 1-based");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericalError("adamw_update: non-finite gradient at element " + std::to_string(i));
    }
  }
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  const double wd = decay ? h.weight_decay : 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    const double p = param[i];
    param[i] = static_cast<float>(p - lr * (mhat / (std::sqrt(vhat) + h.eps) + wd * p));
  }
}

void adamw_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, double lr,
                  const AdamWHyper& hyper, std::uint64_t step, bool decay) {
  if (!param.same_shape(grad)) {
    throw DimensionError("adamw_update: parameter " + to_string(param.shape()) + " vs gradient " +
                         to_string(grad.shape()));
  }
  adamw_update(param.data(), grad.data(), m.data(), v.data(), lr, hyper, step, decay);
}

double apply_update(TrainState& state, const Gradients& g) {
  auto refs = state.params.refs();
  if (g.encoder.size() != refs.size() || state.opt.m.size() != refs.size() + 1) {
    throw DimensionError("apply_update: gradient/optimizer state does not match parameters");
  }
  for (std::size_t k = 0; k < refs.size(); ++k) {
    if (!g.encoder[k].all_finite()) {
      throw NumericalError("non-finite gradient for " + refs[k].name + " at step " +
                           std::to_string(state.step));
    }
  }
  if (!std::isfinite(g.theta_tau)) throw NumericalError("non-finite gradient for theta_tau");

  const double lr = lr_at(static_cast<std::int64_t>(state.opt.step), state.train);
  const std::uint64_t t = state.opt.step + 1;
  AdamWHyper hyper{state.train.beta1, state.train.beta2, state.train.adam_eps, state.train.weight_decay};
  for (std::size_t k = 0; k < refs.size(); ++k) {
    adamw_update(*refs[k].tensor, g.encoder[k], state.opt.m[k], state.opt.v[k], lr, hyper, t,
                 refs[k].decay);
  }
  float theta = static_cast<float>(state.loss.theta_tau);
  const float gtheta = g.theta_tau;
  adamw_update(std::span<float>(&theta, 1), std::span<const float>(&gtheta, 1),
               state.opt.m.back().data(), state.opt.v.back().data(), lr, hyper, t, false);
  state.loss.theta_tau = theta;
  state.loss.clamp_theta();
  state.opt.step = t;
  state.step = t;
  return lr;
}

// ---------------------------------------------------------------------------
// Objective

PartitionPlan plan_for(std::uint64_t seed, std::uint64_t step, std::uint64_t image_id,
                       std::size_t num_tokens, double mask_ratio) {
  CounterRng rng = make_stream(seed, Stream::partition, step, image_id);
  return sample_partition(num_tokens, mask_ratio, rng);
}

namespace {

void check_batch(std::span<const ImageGray> images, std::span<const PartitionPlan> plans) {
  if (images.empty()) throw ConfigError("objective needs at least one image");
  if (images.size() != plans.size()) {
    throw DimensionError("objective: " + std::to_string(images.size()) + " images but " +
                         std::to_string(plans.size()) + " partition plans");
  }
}

// (z1, z2) rows for every image, stacked on the encoder's graph.
Var encode_pairs(const BoundEncoder& enc, std::span<const ImageGray> images,
                 std::span<const PartitionPlan> plans) {
  std::vector<Var> rows;
  rows.reserve(2 * images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    TokenSequence tokens = tokenize(images[i], enc);
    auto [z1, z2] = forward_pair(tokens, plans[i], enc);
    rows.push_back(z1);
    rows.push_back(z2);
  }
  return concat_rows(rows);
}

}  // namespace

BatchLossReport build_objective(const BoundEncoder& enc, Var theta, const LossParams& loss,
                                std::span<const ImageGray> images,
                                std::span<const PartitionPlan> plans) {
  check_batch(images, plans);
  Var z = l2_normalize_rows(encode_pairs(enc, images, plans));
  const auto pairing = adjacent_pairing(images.size());
  return batch_loss(z, pairing, theta, loss);
}

ObjectiveResult compute_objective(const EncoderConfig& cfg, const EncoderParams& params,
                                  const LossParams& loss, std::span<const ImageGray> images,
                                  std::span<const PartitionPlan> plans, std::size_t threads) {
  check_batch(images, plans);
  const std::size_t n = images.size();
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, n);

  struct Worker {
    std::size_t begin = 0, end = 0;
    std::unique_ptr<Graph> graph;
    BoundEncoder enc;
    Var z;
    std::exception_ptr error;
  };
  std::vector<Worker> pool(workers);
  for (std::size_t w = 0, at = 0; w < workers; ++w) {
    const std::size_t len = n / workers + (w < n % workers ? 1 : 0);
    pool[w].begin = at;
    pool[w].end = at + len;
    at += len;
  }

  auto run_all = [&](auto&& body) {
    if (workers == 1) {
      body(pool[0]);
    } else {
      std::vector<std::thread> ts;
      for (std::size_t w = 1; w < workers; ++w) ts.emplace_back([&, w] { body(pool[w]); });
      body(pool[0]);
      for (auto& t : ts) t.join();
    }
    for (auto& w : pool)
      if (w.error) std::rethrow_exception(w.error);
  };

  run_all([&](Worker& w) {
    try {
      w.graph = std::make_unique<Graph>();
      w.enc = bind_encoder(*w.graph, cfg, params);
      w.z = encode_pairs(w.enc, images.subspan(w.begin, w.end - w.begin),
                         plans.subspan(w.begin, w.end - w.begin));
    } catch (...) {
      w.error = std::current_exception();
    }
  });

  // Loss stage over the gathered raw embeddings.
  const std::size_t D = cfg.dim;
  Tensor z_all(Shape{2 * n, D});
  for (const auto& w : pool) {
    const auto src = w.z.value().data();
    std::copy(src.begin(), src.end(), z_all.data().begin() + static_cast<std::ptrdiff_t>(2 * w.begin * D));
  }
  Graph lg;
  Var z_leaf = lg.leaf(std::move(z_all));
  Var theta = lg.leaf(Tensor::scalar(static_cast<float>(loss.theta_tau)));
  const auto pairing = adjacent_pairing(n);
  BatchLossReport report = batch_loss(l2_normalize_rows(z_leaf), pairing, theta, loss);
  lg.backward(report.total);

  ObjectiveResult out;
  out.loss.total = report.total_value();
  out.loss.per_anchor = report.per_anchor;
  out.loss.mean_pos_sim = report.mean_pos_sim;
  out.loss.mean_neg_sim = report.mean_neg_sim;
  out.loss.tau = report.tau_value;
  out.loss.collapse_value = collapse_loss(n);
  out.grads.theta_tau = theta.grad()[0];

  const Tensor& dz = z_leaf.grad();
  run_all([&](Worker& w) {
    try {
      const std::size_t rows = 2 * (w.end - w.begin);
      Tensor seed(Shape{rows, D});
      std::copy_n(dz.data().begin() + static_cast<std::ptrdiff_t>(2 * w.begin * D), rows * D,
                  seed.data().begin());
      w.graph->backward(w.z, seed);
    } catch (...) {
      w.error = std::current_exception();
    }
  });

  const auto leaves0 = pool[0].enc.leaves();
  for (std::size_t k = 0; k < leaves0.size(); ++k) out.grads.encoder.push_back(leaves0[k].grad());
  for (std::size_t w = 1; w < workers; ++w) {
    const auto leaves = pool[w].enc.leaves();
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      Tensor& acc = out.grads.encoder[k];
      const Tensor& gk = leaves[k].grad();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gk[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Steps

StepReport train_step(TrainState& state, std::span<const ImageGray> batch,
                      std::span<const std::uint64_t> ids) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  if (ids.size() != batch.size()) throw DimensionError("train_step: ids/batch length mismatch");
  const std::size_t N = state.encoder.num_tokens();
  std::vector<PartitionPlan> plans;
  plans.reserve(batch.size());
  for (auto id : ids) plans.push_back(plan_for(state.train.seed, state.step, id, N, state.train.mask_ratio));

  const std::size_t micro = std::min(state.train.accum_steps, batch.size());
  const std::size_t chunk = (batch.size() + micro - 1) / micro;

  StepReport report;
  report.step = state.step;
  Gradients total;
  std::size_t chunks = 0;
  for (std::size_t begin = 0; begin < batch.size(); begin += chunk, ++chunks) {
    const std::size_t len = std::min(chunk, batch.size() - begin);
    ObjectiveResult r = compute_objective(state.encoder, state.params, state.loss,
                                          batch.subspan(begin, len),
                                          std::span<const PartitionPlan>(plans).subspan(begin, len),
                                          state.train.threads);
    if (!std::isfinite(r.loss.total)) {
      throw NumericalError("non-finite loss at step " + std::to_string(state.step));
    }
    if (chunks == 0) {
      total = std::move(r.grads);
    } else {
      for (std::size_t k = 0; k < total.encoder.size(); ++k)
        for (std::size_t i = 0; i < total.encoder[k].size(); ++i) total.encoder[k][i] += r.grads.encoder[k][i];
      total.theta_tau += r.grads.theta_tau;
    }
    report.loss.total += r.loss.total;
    report.loss.mean_pos_sim += r.loss.mean_pos_sim;
    report.loss.mean_neg_sim += r.loss.mean_neg_sim;
    report.loss.collapse_value += r.loss.collapse_value;
    report.loss.tau = r.loss.tau;
    report.loss.per_anchor.insert(report.loss.per_anchor.end(), r.loss.per_anchor.begin(),
                                  r.loss.per_anchor.end());
  }
  const double inv = 1.0 / static_cast<double>(chunks);
  if (chunks > 1) {
    for (auto& t : total.encoder)
      for (auto& v : t.data()) v = static_cast<float>(v * inv);
    total.theta_tau = static_cast<float>(total.theta_tau * inv);
  }
  report.loss.total *= inv;
  report.loss.mean_pos_sim *= inv;
  report.loss.mean_neg_sim *= inv;
  report.loss.collapse_value *= inv;
  report.lr = apply_update(state, total);
  return report;
}

std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g",
                static_cast<unsigned long long>(r.step), r.loss, r.tau, r.mean_pos_sim,
                r.mean_neg_sim, r.lr);
  return buf;
}

namespace {

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  CounterRng rng = make_stream(seed, Stream::shuffle, epoch);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

}  // namespace

PretrainResult pretrain(std::span<const ImageGray> dataset, TrainState state,
                        const PretrainOptions& options) {
  if (dataset.empty()) throw ConfigError("pretrain: dataset is empty");
  state.encoder.validate();
  state.train = state.train.resolved(dataset.size());
  state.loss.validate();
  for (const auto& img : dataset) {
    if (img.height != state.encoder.image || img.width != state.encoder.image) {
      throw ConfigError("pretrain: image " + std::to_string(img.height) + "x" +
                        std::to_string(img.width) + " does not match configured side " +
                        std::to_string(state.encoder.image));
    }
  }
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };
  if (state.train.batch_size < 2) {
    log("warning: batch_size 1 has no negatives; the loss is identically 0");
  }

  const std::size_t n = dataset.size();
  const std::size_t spe = state.train.steps_per_epoch(n);
  const std::size_t eff = state.train.batch_size * state.train.accum_steps;
  const auto total = static_cast<std::uint64_t>(state.train.total_steps);

  std::ofstream metrics;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    const auto path = *options.out_dir / "metrics.tsv";
    const bool fresh = state.step == 0 || !std::filesystem::exists(path);
    metrics.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!metrics) throw FormatError("cannot open metrics log " + path.string());
    if (fresh) metrics << kMetricsHeader << '\n';
  }
  auto checkpoint = [&](const std::string& name) {
    if (!options.out_dir) return;
    save_checkpoint(*options.out_dir / name, state);
  };

  PretrainResult result;
  std::size_t near_collapse = 0;
  std::vector<ImageGray> batch;
  std::vector<std::uint64_t> ids;
  std::vector<std::size_t> order;
  std::uint64_t order_epoch = ~std::uint64_t{0};

  while (state.step < total && !(options.stop_at_step && state.step >= *options.stop_at_step)) {
    const std::uint64_t epoch = state.step / spe;
    const std::size_t b = state.step % spe;
    if (epoch != order_epoch) {
      order = epoch_order(state.train.seed, epoch, n);
      order_epoch = epoch;
    }
    batch.clear();
    ids.clear();
    for (std::size_t i = b * eff; i < std::min(n, (b + 1) * eff); ++i) {
      batch.push_back(dataset[order[i]]);
      ids.push_back(order[i]);
    }
    if (batch.size() == 1) log("warning: single-image batch at step " + std::to_string(state.step) + "; loss is 0");

    const StepReport rep = train_step(state, batch, ids);
    MetricsRow row{rep.step, rep.loss.total, rep.loss.tau, rep.loss.mean_pos_sim,
                   rep.loss.mean_neg_sim, rep.lr};
    result.metrics.push_back(row);
    if (metrics) {
      metrics << format_metrics_row(row) << '\n';
      metrics.flush();
    }

    if (std::abs(rep.loss.total - rep.loss.collapse_value) < 1e-3) {
      if (++near_collapse == kCollapseWindow) {
        result.collapse_warned = true;
        log("warning: loss has sat at the collapse value ln(2N-1) for " +
            std::to_string(kCollapseWindow) + " steps (representation collapse?)");
      }
    } else {
      near_collapse = 0;
    }

    if (state.train.checkpoint_every && state.step % state.train.checkpoint_every == 0) {
      checkpoint("checkpoint-" + std::to_string(state.step) + ".spcl");
      checkpoint("checkpoint-last.spcl");
    }
    if (state.step % 25 == 0 || state.step == total) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "step %llu/%llu loss %.6f tau %.4f pos %.4f neg %.4f lr %.3g",
                    static_cast<unsigned long long>(state.step), static_cast<unsigned long long>(total),
                    rep.loss.total, rep.loss.tau, rep.loss.mean_pos_sim, rep.loss.mean_neg_sim, rep.lr);
      log(buf);
    }
  }
  checkpoint("checkpoint-last.spcl");
  result.state = std::move(state);
  return result;
}

}  // namespace spcl
