#include "spcl/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "spcl/error.hpp"

namespace spcl {

std::size_t LabeledEmbeddings::num_classes() const {
  if (labels.empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
}

void LabeledEmbeddings::validate() const {
  if (labels.empty()) throw ConfigError("embeddings: empty set");
  if (embeddings.rows() != labels.size()) {
    throw DimensionError("embeddings: " + std::to_string(embeddings.rows()) + " rows but " +
                         std::to_string(labels.size()) + " labels");
  }
  for (int l : labels)
    if (l < 0) throw ConfigError("embeddings: negative label");
}

LabeledEmbeddings embed_dataset(std::span<const ImageGray> images, std::span<const int> labels,
                                const EncoderConfig& cfg, const EncoderParams& params) {
  if (images.size() != labels.size()) throw DimensionError("embed_dataset: images/labels mismatch");
  if (images.empty()) throw ConfigError("embed_dataset: no images");
  LabeledEmbeddings out;
  out.embeddings = Tensor(Shape{images.size(), cfg.dim});
  out.labels.assign(labels.begin(), labels.end());
  for (std::size_t i = 0; i < images.size(); ++i) {
    Graph g;
    BoundEncoder enc = bind_encoder(g, cfg, params, false);
    Var z = l2_normalize_rows(forward_full(tokenize(images[i], enc), enc));
    std::copy(z.value().data().begin(), z.value().data().end(), out.embeddings.row(i).begin());
  }
  return out;
}

ProbeResult linear_probe(const LabeledEmbeddings& train, const LabeledEmbeddings& test,
                         const LinearProbeOptions& options) {
  train.validate();
  test.validate();
  if (train.dim() != test.dim()) throw DimensionError("linear_probe: train/test dims differ");
  const std::size_t C = std::max({train.num_classes(), test.num_classes(), std::size_t{2}});
  const std::size_t D = train.dim(), M = train.size();

  std::vector<double> mu(D, 0.0), inv_sd(D, 1.0);
  if (options.standardize) {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t d = 0; d < D; ++d) mu[d] += train.embeddings.at(i, d);
    for (auto& m : mu) m /= static_cast<double>(M);
    std::vector<double> var(D, 0.0);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t d = 0; d < D; ++d) {
        const double x = train.embeddings.at(i, d) - mu[d];
        var[d] += x * x;
      }
    for (std::size_t d = 0; d < D; ++d) inv_sd[d] = 1.0 / std::sqrt(var[d] / static_cast<double>(M) + 1e-12);
  }
  auto features = [&](const LabeledEmbeddings& e) {
    std::vector<double> f(e.size() * D);
    for (std::size_t i = 0; i < e.size(); ++i)
      for (std::size_t d = 0; d < D; ++d) f[i * D + d] = (e.embeddings.at(i, d) - mu[d]) * inv_sd[d];
    return f;
  };
  const auto xtr = features(train);
  const auto xte = features(test);

  ProbeResult result;
  std::vector<std::size_t> train_count(C, 0);
  for (int l : train.labels) ++train_count[static_cast<std::size_t>(l)];
  for (std::size_t c = 0; c < C; ++c)
    if (train_count[c] == 0) result.skipped_classes.push_back(static_cast<int>(c));

  std::vector<double> W(D * C, 0.0), b(C, 0.0), logits(C), gW(D * C), gb(C);
  auto scores = [&](const double* x, std::vector<double>& out) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = b[c];
      for (std::size_t d = 0; d < D; ++d) s += x[d] * W[d * C + c];
      out[c] = s;
    }
  };
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::fill(gW.begin(), gW.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
      const double* x = &xtr[i * D];
      scores(x, logits);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (auto& v : logits) z += (v = std::exp(v - mx));
      const auto y = static_cast<std::size_t>(train.labels[i]);
      loss += -std::log(logits[y] / z);
      for (std::size_t c = 0; c < C; ++c) {
        const double d = logits[c] / z - (c == y ? 1.0 : 0.0);
        gb[c] += d;
        for (std::size_t k = 0; k < D; ++k) gW[k * C + c] += d * x[k];
      }
    }
    result.loss_curve.push_back(loss / static_cast<double>(M));
    const double step = options.lr / static_cast<double>(M);
    for (std::size_t k = 0; k < W.size(); ++k) W[k] -= step * gW[k];
    for (std::size_t c = 0; c < C; ++c) b[c] -= step * gb[c];
  }

  std::vector<std::size_t> hit(C, 0), seen(C, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    scores(&xte[i * D], logits);
    const auto pred = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    const auto y = static_cast<std::size_t>(test.labels[i]);
    ++seen[y];
    if (pred == y) {
      ++correct;
      ++hit[y];
    }
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  result.per_class.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (seen[c] == 0 || train_count[c] == 0) continue;
    result.per_class[c] = static_cast<double>(hit[c]) / static_cast<double>(seen[c]);
  }
  return result;
}

std::vector<int> knn_predict(const LabeledEmbeddings& bank, const Tensor& queries, std::size_t k) {
  if (bank.size() == 0) throw ConfigError("knn: empty bank");
  bank.validate();
  if (k == 0 || k > bank.size()) {
    throw ConfigError("knn: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(bank.size()) + "]");
  }
  if (queries.cols() != bank.dim()) throw DimensionError("knn: query/bank dims differ");
  const std::size_t D = bank.dim(), C = bank.num_classes();

  auto unit = [](std::span<const float> x) {
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    return ss > 0.0 ? 1.0 / std::sqrt(ss) : 0.0;
  };
  std::vector<double> bank_inv(bank.size());
  for (std::size_t j = 0; j < bank.size(); ++j) bank_inv[j] = unit(bank.embeddings.row(j));

  std::vector<int> out;
  std::vector<std::pair<double, std::size_t>> sims(bank.size());
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    const auto qr = queries.row(q);
    const double qi = unit(qr);
    for (std::size_t j = 0; j < bank.size(); ++j) {
      const auto br = bank.embeddings.row(j);
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += static_cast<double>(qr[d]) * br[d];
      sims[j] = {dot * qi * bank_inv[j], j};
    }
    // Highest similarity first; equal similarity keeps bank order.
    std::stable_sort(sims.begin(), sims.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::size_t> votes(C, 0);
    std::vector<double> mass(C, 0.0);
    for (std::size_t t = 0; t < k; ++t) {
      const auto label = static_cast<std::size_t>(bank.labels[sims[t].second]);
      ++votes[label];
      mass[label] += sims[t].first;
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best])) best = c;
    }
    out.push_back(static_cast<int>(best));
  }
  return out;
}

double knn_probe(const LabeledEmbeddings& bank, const LabeledEmbeddings& queries, std::size_t k) {
  queries.validate();
  const auto pred = knn_predict(bank, queries.embeddings, k);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == queries.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

}  // namespace spcl
