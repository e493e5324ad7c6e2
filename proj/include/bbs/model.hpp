#pragma once

#include "bbs/loss.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace bbs {

/// Fully connected layer: y = weight * x + bias, weight is (out x in).
struct Layer {
  Matrix weight;
  Vector bias;
};

/// MLP embedding backbone. Hidden layers use ReLU; the last layer is linear and is
/// optionally L2-normalized.
struct ModelParams {
  std::vector<Layer> layers;
  bool normalize_embedding = false;

  [[nodiscard]] Index input_dim() const { return layers.front().weight.cols(); }
  [[nodiscard]] Index embed_dim() const { return layers.back().weight.rows(); }
  [[nodiscard]] std::size_t num_parameters() const;
  void validate() const;

  /// He-normal weights, zero biases.
  static ModelParams init(Index input_dim, std::span<const std::size_t> hidden, Index embed_dim,
                          bool normalize, std::mt19937_64& rng);
  /// Single identity layer (no hidden units).
  static ModelParams identity(Index dim, bool normalize);
};

struct ModelGrad {
  std::vector<Layer> layers;

  static ModelGrad zeros_like(const ModelParams& params);
  void set_zero();
};

/// Intermediate values kept for the backward pass.
struct ForwardCache {
  std::vector<Vector> inputs;  // inputs[l] feeds layer l
  Vector raw_output;           // before normalization
};

[[nodiscard]] Vector forward_embed(const ModelParams& params, const Eigen::Ref<const Vector>& feature);
Vector forward_embed(const ModelParams& params, const Eigen::Ref<const Vector>& feature,
                     ForwardCache& cache);

/// Adds dL/dparams into `grad` given dL/d(embedding).
void backward_embed(const ModelParams& params, const ForwardCache& cache,
                    const Eigen::Ref<const Vector>& d_embedding, ModelGrad& grad);

}  // namespace bbs
