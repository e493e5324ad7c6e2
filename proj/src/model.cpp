#include "bbs/model.hpp"

#include "bbs/error.hpp"

#include <cmath>
#include <string>

namespace bbs {

std::size_t ModelParams::num_parameters() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

void ModelParams::validate() const {
  if (layers.empty()) throw ValidationError("backbone needs at least one layer");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.bias.size() != l.weight.rows()) {
      throw ValidationError("layer " + std::to_string(i) + ": bias length != output size");
    }
    if (i > 0 && l.weight.cols() != layers[i - 1].weight.rows()) {
      throw ValidationError("layer " + std::to_string(i) + ": input size does not chain");
    }
    if (!l.weight.allFinite() || !l.bias.allFinite()) {
      throw ValidationError("layer " + std::to_string(i) + ": non-finite parameter");
    }
  }
}

ModelParams ModelParams::init(Index input_dim, std::span<const std::size_t> hidden,
                              Index embed_dim, bool normalize, std::mt19937_64& rng) {
  if (input_dim < 1 || embed_dim < 1) throw ValidationError("backbone dimensions must be positive");
  ModelParams p;
  p.normalize_embedding = normalize;
  Index in = input_dim;
  const auto add = [&](Index out) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in)));
    Layer l{Matrix(out, in), Vector::Zero(out)};
    for (Index c = 0; c < in; ++c) {
      for (Index r = 0; r < out; ++r) l.weight(r, c) = normal(rng);
    }
    p.layers.push_back(std::move(l));
    in = out;
  };
  for (auto h : hidden) {
    if (h == 0) throw ValidationError("hidden layer width must be positive");
    add(static_cast<Index>(h));
  }
  add(embed_dim);
  return p;
}

ModelParams ModelParams::identity(Index dim, bool normalize) {
  ModelParams p;
  p.normalize_embedding = normalize;
  p.layers.push_back({Matrix::Identity(dim, dim), Vector::Zero(dim)});
  return p;
}

ModelGrad ModelGrad::zeros_like(const ModelParams& params) {
  ModelGrad g;
  for (const auto& l : params.layers) {
    g.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
  }
  return g;
}

void ModelGrad::set_zero() {
  for (auto& l : layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

Vector forward_embed(const ModelParams& params, const Eigen::Ref<const Vector>& feature) {
  ForwardCache cache;
  return forward_embed(params, feature, cache);
}

Vector forward_embed(const ModelParams& params, const Eigen::Ref<const Vector>& feature,
                     ForwardCache& cache) {
  if (params.layers.empty()) throw ValidationError("backbone has no layers");
  if (feature.size() != params.input_dim()) {
    throw ValidationError("feature has dimension " + std::to_string(feature.size()) +
                          " but the backbone expects " + std::to_string(params.input_dim()));
  }
  const std::size_t n = params.layers.size();
  cache.inputs.resize(n);
  cache.inputs[0] = feature;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = params.layers[i];
    Vector z = l.weight * cache.inputs[i] + l.bias;
    if (i + 1 < n) {
      cache.inputs[i + 1] = z.cwiseMax(0.0);
    } else {
      cache.raw_output = std::move(z);
    }
  }
  if (!params.normalize_embedding) return cache.raw_output;
  return cache.raw_output / guarded_norm(cache.raw_output);
}

void backward_embed(const ModelParams& params, const ForwardCache& cache,
                    const Eigen::Ref<const Vector>& d_embedding, ModelGrad& grad) {
  Vector d = d_embedding;
  if (params.normalize_embedding) {
    // e = y / n(y):  de/dy = I / n - y y^T / n^3
    const Vector& y = cache.raw_output;
    const double n = guarded_norm(y);
    d = d / n - y * (y.dot(d_embedding) / (n * n * n));
  }
  for (std::size_t i = params.layers.size(); i-- > 0;) {
    const auto& l = params.layers[i];
    grad.layers[i].weight.noalias() += d * cache.inputs[i].transpose();
    grad.layers[i].bias += d;
    if (i == 0) break;
    Vector back = l.weight.transpose() * d;
    // ReLU: inputs[i] is max(z, 0), so a positive input marks an active unit.
    d = back.cwiseProduct((cache.inputs[i].array() > 0.0).cast<double>().matrix());
  }
}

}  // namespace bbs
