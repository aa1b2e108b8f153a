#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "spcl/encoder.hpp"
#include "spcl/patching.hpp"
#include "spcl/tensor.hpp"

namespace spcl {

/// Unit-row embeddings [M×D] with one label in [0, C) per row.
struct LabeledEmbeddings {
  Tensor embeddings;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const { return embeddings.cols(); }
  // 1 + largest label.
  std::size_t num_classes() const;
  void validate() const;
};

/// forward_full + L2 normalization for every image, paired with its label.
LabeledEmbeddings embed_dataset(std::span<const ImageGray> images, std::span<const int> labels,
                                const EncoderConfig& cfg, const EncoderParams& params);

struct LinearProbeOptions {
  std::size_t epochs = 500;
  double lr = 0.5;
  // Standardize each feature with the training-set mean/std before fitting.
  bool standardize = true;
};

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<std::optional<double>> per_class;  // nullopt: class absent from test set or skipped
  std::vector<double> loss_curve;                // training loss before each epoch's update
  std::vector<int> skipped_classes;              // absent from the training set
};

/// Multinomial logistic regression (one D→C linear map with bias, softmax
/// cross-entropy, full-batch gradient descent from zero) on frozen features.
ProbeResult linear_probe(const LabeledEmbeddings& train, const LabeledEmbeddings& test,
                         const LinearProbeOptions& options = {});

/// Cosine k-nearest-neighbour majority vote. Ties go to the larger summed
/// similarity, then to the lower label.
std::vector<int> knn_predict(const LabeledEmbeddings& bank, const Tensor& queries, std::size_t k);
double knn_probe(const LabeledEmbeddings& bank, const LabeledEmbeddings& queries, std::size_t k = 5);

}  // namespace spcl
