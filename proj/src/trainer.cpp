#include "bbs/trainer.hpp"

#include "bbs/error.hpp"
#include "bbs/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <string>

namespace bbs {

namespace {

// Contiguous parameter storage paired with its gradient buffer.
struct ParamBlock {
  double* value;
  double* grad;
  Index size;
};

Classifier init_classifier(Index dim, Index num_classes, std::mt19937_64& rng) {
  Classifier clf(dim, num_classes);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  for (Index j = 0; j < num_classes; ++j) {
    for (Index r = 0; r < dim; ++r) clf.weights(r, j) = normal(rng);
  }
  return clf;
}

// Classifier, gradient and velocity for one training mode.
class LossHead {
 public:
  LossHead(const TrainConfig& config, LabelSpace space, Classifier clf)
      : config_(config), space_(std::move(space)) {
    if (config.mode == TrainMode::ParallelBbs) {
      sharded_ = ShardedClassifier::scatter(clf, shard_layout(space_.total(), config.shards));
      shard_grads_ = zero_shard_grads(sharded_);
      shard_velocity_ = zero_shard_grads(sharded_);
      engine_ = std::make_unique<ParallelBbs>(space_, sharded_.layout, config.loss);
    } else {
      clf_ = std::move(clf);
      grad_ = ClassifierGrad(clf_.dim(), clf_.num_classes());
      velocity_ = ClassifierGrad(clf_.dim(), clf_.num_classes());
    }
  }

  [[nodiscard]] const LabelSpace& space() const { return space_; }

  // Mask the current mode would use for this sample.
  NegativeMask mask_for(const Vector& x, const Owner& owner, std::span<const std::size_t> ignored,
                        double ratio) {
    switch (config_.mode) {
      case TrainMode::Baseline1: return NegativeMask::for_owner(space_, owner, true);
      case TrainMode::Baseline2: return NegativeMask::for_owner(space_, owner, false);
      case TrainMode::Bbs: return mining_mask(space_, config_.loss, clf_, x, owner, ignored);
      case TrainMode::ParallelBbs: {
        const auto tau = taus();
        engine_->loss(sharded_, x, space_.network_id(owner), owner.basket, {tau, ratio});
        auto mask = NegativeMask::for_owner(space_, owner, true);
        const auto bits = engine_->last_mask();
        const IdRange own = space_.basket_range(owner.basket);
        for (std::size_t id = 1; id <= bits.size(); ++id) {
          if (!own.contains(id)) mask.set(id, bits[id - 1] != 0);
        }
        return mask;
      }
    }
    throw ValidationError("unknown training mode");
  }

  double accumulate(const Vector& x, const Owner& owner, std::span<const std::size_t> ignored,
                    double ratio, double weight, Eigen::Ref<Vector> d_x) {
    if (config_.mode == TrainMode::ParallelBbs) {
      const auto tau = taus();
      return engine_->accumulate(sharded_, x, space_.network_id(owner), owner.basket,
                                 {tau, ratio}, weight, shard_grads_, d_x);
    }
    const auto mask = mask_for(x, owner, ignored, ratio);
    return bbs_loss_accumulate(space_, config_.loss, clf_, x, owner, mask, weight, grad_, d_x);
  }

  double accumulate(const Vector& x, const NegativeMask& mask, double weight,
                    Eigen::Ref<Vector> d_x) {
    if (config_.mode == TrainMode::ParallelBbs) {
      return engine_->accumulate(sharded_, x, mask, weight, shard_grads_, d_x);
    }
    return bbs_loss_accumulate(space_, config_.loss, clf_, x, mask.owner(), mask, weight, grad_,
                               d_x);
  }

  void zero_grad() {
    if (config_.mode == TrainMode::ParallelBbs) {
      for (auto& g : shard_grads_) g.set_zero();
    } else {
      grad_.set_zero();
    }
  }

  void step(double lr, double momentum, double weight_decay) {
    if (config_.mode == TrainMode::ParallelBbs) {
      for (std::size_t g = 0; g < sharded_.shards.size(); ++g) {
        auto& s = sharded_.shards[g];
        sgd_update(s.weights, shard_velocity_[g].weights, shard_grads_[g].weights, lr, momentum,
                   weight_decay);
        sgd_update(s.bias, shard_velocity_[g].bias, shard_grads_[g].bias, lr, momentum,
                   weight_decay);
      }
    } else {
      sgd_update(clf_.weights, velocity_.weights, grad_.weights, lr, momentum, weight_decay);
      sgd_update(clf_.bias, velocity_.bias, grad_.bias, lr, momentum, weight_decay);
    }
  }

  [[nodiscard]] Classifier classifier() const {
    return config_.mode == TrainMode::ParallelBbs ? sharded_.gather() : clf_;
  }

  std::vector<ParamBlock> blocks() {
    std::vector<ParamBlock> out;
    const auto add = [&](auto& value, auto& grad) {
      out.push_back({value.data(), grad.data(), value.size()});
    };
    if (config_.mode == TrainMode::ParallelBbs) {
      for (std::size_t g = 0; g < sharded_.shards.size(); ++g) {
        add(sharded_.shards[g].weights, shard_grads_[g].weights);
        add(sharded_.shards[g].bias, shard_grads_[g].bias);
      }
    } else {
      add(clf_.weights, grad_.weights);
      add(clf_.bias, grad_.bias);
    }
    return out;
  }

 private:
  std::vector<std::size_t> taus() const {
    return std::vector<std::size_t>(space_.num_baskets(), config_.tau);
  }

  const TrainConfig& config_;
  LabelSpace space_;
  Classifier clf_;
  ClassifierGrad grad_;
  ClassifierGrad velocity_;
  ShardedClassifier sharded_;
  std::vector<ClassifierGrad> shard_grads_;
  std::vector<ClassifierGrad> shard_velocity_;
  std::unique_ptr<ParallelBbs> engine_;
};

bool uses_mining(TrainMode mode) {
  return mode == TrainMode::Bbs || mode == TrainMode::ParallelBbs;
}

struct Initialized {
  ModelParams model;
  Classifier classifier;
};

Initialized initialize(const TrainConfig& config, Index input_dim, const LabelSpace& space) {
  std::mt19937_64 rng(config.seed);
  Initialized init;
  init.model = ModelParams::init(input_dim, config.backbone.hidden,
                                 static_cast<Index>(config.backbone.embed_dim),
                                 is_cosine(config.loss.method), rng);
  init.classifier = init_classifier(static_cast<Index>(config.backbone.embed_dim),
                                    static_cast<Index>(space.total()), rng);
  return init;
}

}  // namespace

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::Baseline1: return "baseline1";
    case TrainMode::Baseline2: return "baseline2";
    case TrainMode::Bbs: return "bbs";
    case TrainMode::ParallelBbs: return "pbbs";
  }
  return "unknown";
}

TrainMode parse_train_mode(std::string_view name) {
  for (auto m : {TrainMode::Baseline1, TrainMode::Baseline2, TrainMode::Bbs, TrainMode::ParallelBbs}) {
    if (to_string(m) == name) return m;
  }
  throw ValidationError("unknown training mode '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  loss.validate();
  if (tau < 1) throw ValidationError("tau must be at least 1");
  if (drop_every < 1) throw ValidationError("t_r must be at least 1");
  if (epochs < 1) throw ValidationError("epochs must be at least 1");
  if (batch_size < 1) throw ValidationError("batch size must be at least 1");
  if (mode == TrainMode::ParallelBbs && shards < 1) {
    throw ValidationError("parallel mode needs at least one shard");
  }
  if (backbone.embed_dim < 1) throw ValidationError("embedding dimension must be positive");
  if (!(optimizer.lr0 > 0.0)) throw ValidationError("learning rate must be positive");
}

MiningSchedule TrainConfig::schedule(std::size_t num_baskets) const {
  return {std::vector<std::size_t>(num_baskets, tau), drop_every, epochs};
}

double lr_at(const SgdConfig& opt, std::size_t epoch) {
  const auto drops = std::count_if(opt.lr_drop_epochs.begin(), opt.lr_drop_epochs.end(),
                                   [&](std::size_t e) { return e <= epoch; });
  return opt.lr0 * std::pow(10.0, -static_cast<double>(drops));
}

void sgd_update(Eigen::Ref<Matrix> weights, Eigen::Ref<Matrix> velocity,
                const Eigen::Ref<const Matrix>& grad, double lr, double momentum,
                double weight_decay) {
  velocity = momentum * velocity + grad + weight_decay * weights;
  weights -= lr * velocity;
}

SgdState SgdState::zeros_like(const ModelParams& params, const Classifier& clf) {
  return {ModelGrad::zeros_like(params), ClassifierGrad(clf.dim(), clf.num_classes())};
}

void sgd_step(ModelParams& params, Classifier& clf, const ModelGrad& model_grad,
              const ClassifierGrad& clf_grad, SgdState& state, double lr, double momentum,
              double weight_decay) {
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    sgd_update(params.layers[i].weight, state.model.layers[i].weight, model_grad.layers[i].weight,
               lr, momentum, weight_decay);
    sgd_update(params.layers[i].bias, state.model.layers[i].bias, model_grad.layers[i].bias, lr,
               momentum, weight_decay);
  }
  sgd_update(clf.weights, state.classifier.weights, clf_grad.weights, lr, momentum, weight_decay);
  sgd_update(clf.bias, state.classifier.bias, clf_grad.bias, lr, momentum, weight_decay);
}

std::vector<TrainSample> training_samples(const BasketSet& data) {
  std::vector<TrainSample> out;
  out.reserve(data.num_samples());
  for (std::size_t m = 0; m < data.baskets.size(); ++m) {
    for (const auto& s : data.baskets[m].samples) {
      TrainSample t;
      t.feature = Eigen::Map<const Eigen::VectorXf>(s.feature.data(),
                                                    static_cast<Index>(s.feature.size()))
                      .cast<double>();
      t.owner = {m + 1, s.local_label};
      t.global_class = s.global_class;
      out.push_back(std::move(t));
    }
  }
  return out;
}

TrainResult train(const TrainConfig& config, const BasketSet& data) {
  config.validate();
  data.validate();
  const LabelSpace space = data.label_space();
  const MiningSchedule sched = config.schedule(space.num_baskets());
  const auto samples = training_samples(data);
  if (config.batch_size > samples.size()) {
    throw ValidationError("batch size exceeds the number of training samples");
  }

  auto init = initialize(config, static_cast<Index>(data.dim), space);
  ModelParams model = std::move(init.model);
  LossHead head(config, space, std::move(init.classifier));
  ModelGrad model_grad = ModelGrad::zeros_like(model);
  ModelGrad model_velocity = ModelGrad::zeros_like(model);

  std::mt19937_64 order_rng(config.seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  ForwardCache cache;
  Vector d_x;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr_at(config.optimizer, epoch);
    const double ratio = schedule_ratio(sched, epoch);
    if (uses_mining(config.mode)) entry.ratio = ratio;
    const auto ignored = ignored_counts(space, sched, ratio);

    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const double weight = 1.0 / static_cast<double>(end - begin);
      head.zero_grad();
      model_grad.set_zero();
      double batch_loss = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& s = samples[order[i]];
        const Vector x = forward_embed(model, s.feature, cache);
        d_x = Vector::Zero(x.size());
        batch_loss += head.accumulate(x, s.owner, ignored, ratio, weight, d_x);
        backward_embed(model, cache, d_x, model_grad);
      }
      ++step;
      if (!std::isfinite(batch_loss)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step));
      }
      batch_loss *= weight;
      entry.batch_losses.push_back(batch_loss);
      epoch_loss += batch_loss * static_cast<double>(end - begin);

      const auto& opt = config.optimizer;
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        sgd_update(model.layers[l].weight, model_velocity.layers[l].weight,
                   model_grad.layers[l].weight, entry.lr, opt.momentum, opt.weight_decay);
        sgd_update(model.layers[l].bias, model_velocity.layers[l].bias, model_grad.layers[l].bias,
                   entry.lr, opt.momentum, opt.weight_decay);
      }
      head.step(entry.lr, opt.momentum, opt.weight_decay);
    }
    entry.mean_loss = epoch_loss / static_cast<double>(samples.size());
    entry.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                              started)
                        .count();
    result.log.push_back(std::move(entry));
  }

  result.model = std::move(model);
  result.classifier = head.classifier();
  result.space = space;
  result.loss = config.loss;
  return result;
}

double gradient_rel_error(const Eigen::Ref<const Matrix>& analytic,
                          const Eigen::Ref<const Matrix>& numeric) {
  const double denom = analytic.norm() + numeric.norm();
  if (denom == 0.0) return 0.0;
  return (analytic - numeric).norm() / denom;
}

GradCheckReport grad_check(const TrainConfig& config, const BasketSet& data, double tolerance,
                           std::size_t num_samples) {
  config.validate();
  data.validate();
  const LabelSpace space = data.label_space();
  const MiningSchedule sched = config.schedule(space.num_baskets());
  auto samples = training_samples(data);
  if (samples.empty()) throw ValidationError("gradient check needs at least one sample");
  samples.resize(std::min(num_samples, samples.size()));

  auto init = initialize(config, static_cast<Index>(data.dim), space);
  ModelParams model = std::move(init.model);
  LossHead head(config, space, std::move(init.classifier));

  const std::size_t mid_epoch = (config.epochs + 1) / 2;
  const double ratio = schedule_ratio(sched, mid_epoch);
  const auto ignored = ignored_counts(space, sched, ratio);
  std::vector<NegativeMask> masks;
  ForwardCache cache;
  for (const auto& s : samples) {
    masks.push_back(head.mask_for(forward_embed(model, s.feature, cache), s.owner, ignored, ratio));
  }

  ModelGrad model_grad = ModelGrad::zeros_like(model);
  const double weight = 1.0 / static_cast<double>(samples.size());
  const auto total_loss = [&](bool with_grad) {
    double loss = 0.0;
    if (with_grad) {
      head.zero_grad();
      model_grad.set_zero();
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Vector x = forward_embed(model, samples[i].feature, cache);
      Vector d_x = Vector::Zero(x.size());
      loss += head.accumulate(x, masks[i], with_grad ? weight : 0.0, d_x) * weight;
      if (with_grad) backward_embed(model, cache, d_x, model_grad);
    }
    return loss;
  };

  std::vector<ParamBlock> blocks;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    blocks.push_back({model.layers[l].weight.data(), model_grad.layers[l].weight.data(),
                      model.layers[l].weight.size()});
    blocks.push_back({model.layers[l].bias.data(), model_grad.layers[l].bias.data(),
                      model.layers[l].bias.size()});
  }
  for (const auto& b : head.blocks()) blocks.push_back(b);

  GradCheckReport report;
  for (const auto& b : blocks) report.num_parameters += static_cast<std::size_t>(b.size);
  if (report.num_parameters > 1000) {
    throw ValidationError("gradient check instance has " + std::to_string(report.num_parameters) +
                          " parameters; at most 1000 are allowed");
  }

  total_loss(true);
  constexpr double h = 1e-5;
  for (const auto& b : blocks) {
    const Eigen::Map<const Vector> analytic(b.grad, b.size);
    const Vector analytic_copy = analytic;
    Vector numeric(b.size);
    for (Index i = 0; i < b.size; ++i) {
      const double saved = b.value[i];
      b.value[i] = saved + h;
      const double plus = total_loss(false);
      b.value[i] = saved - h;
      const double minus = total_loss(false);
      b.value[i] = saved;
      numeric[i] = (plus - minus) / (2.0 * h);
    }
    report.max_rel_error =
        std::max(report.max_rel_error, gradient_rel_error(analytic_copy, numeric));
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace bbs
