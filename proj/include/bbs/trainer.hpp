#pragma once

#include "bbs/basket.hpp"
#include "bbs/dataset.hpp"
#include "bbs/loss.hpp"
#include "bbs/model.hpp"

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace bbs {

enum class TrainMode {
  Baseline1,    // concatenated baskets, every network id is its own class
  Baseline2,    // one softmax per basket on a shared backbone
  Bbs,          // basket softmax with serial mining
  ParallelBbs,  // basket softmax with sharded mining
};

[[nodiscard]] std::string_view to_string(TrainMode mode);
/// baseline1 | baseline2 | bbs | pbbs
[[nodiscard]] TrainMode parse_train_mode(std::string_view name);

struct SgdConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::size_t> lr_drop_epochs{5, 10, 15};
};

struct BackboneConfig {
  std::vector<std::size_t> hidden{64};
  std::size_t embed_dim = 32;
};

struct TrainConfig {
  LossConfig loss = LossConfig::make(LossMethod::ArcFace, 16.0, 0.1);
  TrainMode mode = TrainMode::Bbs;
  std::size_t tau = 2;         // minimum ignored count, shared by all baskets
  std::size_t drop_every = 2;  // t_r
  SgdConfig optimizer;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  std::size_t shards = 1;  // ParallelBbs only
  BackboneConfig backbone;

  void validate() const;
  [[nodiscard]] MiningSchedule schedule(std::size_t num_baskets) const;
};

/// lr0 * 10^-(number of drop epochs <= epoch).
[[nodiscard]] double lr_at(const SgdConfig& opt, std::size_t epoch);

/// Classic momentum with weight decay folded into the gradient:
///   v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v
void sgd_update(Eigen::Ref<Matrix> weights, Eigen::Ref<Matrix> velocity,
                const Eigen::Ref<const Matrix>& grad, double lr, double momentum,
                double weight_decay);

/// Velocity buffers matching a backbone and a classifier.
struct SgdState {
  ModelGrad model;
  ClassifierGrad classifier;

  static SgdState zeros_like(const ModelParams& params, const Classifier& clf);
};

void sgd_step(ModelParams& params, Classifier& clf, const ModelGrad& model_grad,
              const ClassifierGrad& clf_grad, SgdState& state, double lr, double momentum,
              double weight_decay);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::optional<double> ratio;  // ignored ratio; absent for the baselines
  double mean_loss = 0.0;
  double wall_ms = 0.0;
  std::vector<double> batch_losses;
};

struct TrainResult {
  ModelParams model;
  Classifier classifier;
  LabelSpace space;
  LossConfig loss;
  std::vector<EpochLog> log;
};

/// Trains the backbone and classifier on the baskets. Throws TrainingError on a
/// non-finite loss.
[[nodiscard]] TrainResult train(const TrainConfig& config, const BasketSet& data);

/// One sample as the trainer sees it.
struct TrainSample {
  Vector feature;
  Owner owner;
  std::uint32_t global_class = 0;
};
[[nodiscard]] std::vector<TrainSample> training_samples(const BasketSet& data);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t num_parameters = 0;
  bool passed = false;
};

/// Central-difference check (h = 1e-5) of the full per-sample loss over backbone and
/// classifier parameters. The negative mask is computed once and held fixed. Uses the
/// first few samples of `data`; the instance must have at most 1000 parameters.
[[nodiscard]] GradCheckReport grad_check(const TrainConfig& config, const BasketSet& data,
                                         double tolerance, std::size_t num_samples = 3);

/// Relative error between two gradient blocks: |a - b| / (|a| + |b|), 0 when both vanish.
[[nodiscard]] double gradient_rel_error(const Eigen::Ref<const Matrix>& analytic,
                                        const Eigen::Ref<const Matrix>& numeric);

}  // namespace bbs
