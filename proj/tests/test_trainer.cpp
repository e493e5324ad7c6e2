#include "bbs/error.hpp"
#include "bbs/trainer.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace bbs;

namespace {

TrainConfig small_config(TrainMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.epochs = 4;
  c.drop_every = 1;
  c.batch_size = 8;
  c.backbone.hidden = {6};
  c.backbone.embed_dim = 4;
  c.optimizer.lr_drop_epochs = {3};
  c.seed = 11;
  return c;
}

BasketSet small_split(std::size_t classes = 12, std::uint64_t seed = 2) {
  const auto data = gen_synthetic(classes, 4, 5, 0.2, seed);
  return split_dataset(data, {overlap_probs(0.5), seed + 1});
}

std::vector<double> all_batch_losses(const TrainResult& r) {
  std::vector<double> out;
  for (const auto& e : r.log) out.insert(out.end(), e.batch_losses.begin(), e.batch_losses.end());
  return out;
}

}  // namespace

TEST(TrainMode, NamesRoundTrip) {
  for (auto m : {TrainMode::Baseline1, TrainMode::Baseline2, TrainMode::Bbs, TrainMode::ParallelBbs}) {
    EXPECT_EQ(parse_train_mode(to_string(m)), m);
  }
  EXPECT_THROW((void)parse_train_mode("bbs2"), ValidationError);
}

TEST(Backbone, IdentityLayer) {
  const auto p = ModelParams::identity(3, false);
  const Vector x = Vector::LinSpaced(3, -1.0, 2.0);
  EXPECT_EQ(forward_embed(p, x), x);
  const auto n = ModelParams::identity(3, true);
  EXPECT_NEAR(forward_embed(n, x).norm(), 1.0, 1e-12);
  EXPECT_THROW((void)forward_embed(p, Vector::Zero(4)), ValidationError);
}

TEST(Backbone, MatchesPerNeuronEvaluation) {
  std::mt19937_64 rng(1);
  const std::vector<std::size_t> hidden{5, 3};
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = ModelParams::init(4, hidden, 2, trial % 2 == 0, rng);
    const Vector x = oracle::random_vector(4, rng);
    std::vector<double> act(x.data(), x.data() + x.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      const auto& layer = p.layers[l];
      std::vector<double> next(static_cast<std::size_t>(layer.weight.rows()));
      for (Index r = 0; r < layer.weight.rows(); ++r) {
        long double z = layer.bias(r);
        for (Index c = 0; c < layer.weight.cols(); ++c) z += layer.weight(r, c) * act[c];
        const bool last = l + 1 == p.layers.size();
        next[r] = static_cast<double>(last ? z : std::max(z, 0.0L));
      }
      act = std::move(next);
    }
    Vector expected = Eigen::Map<Vector>(act.data(), static_cast<Index>(act.size()));
    if (p.normalize_embedding) expected /= std::sqrt(expected.squaredNorm() + 1e-12);
    EXPECT_LT((forward_embed(p, x) - expected).norm(), 1e-12);
  }
}

TEST(Backbone, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  const std::vector<std::size_t> hidden{6};
  for (int trial = 0; trial < 20; ++trial) {
    auto p = ModelParams::init(4, hidden, 3, trial % 2 == 0, rng);
    const Vector x = oracle::random_vector(4, rng);
    const Vector probe = oracle::random_vector(3, rng);
    // scalar objective probe . embed(x)
    const auto f = [&] { return probe.dot(forward_embed(p, x)); };
    ForwardCache cache;
    (void)forward_embed(p, x, cache);
    auto grad = ModelGrad::zeros_like(p);
    backward_embed(p, cache, probe, grad);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      const Matrix dw = oracle::central_diff(p.layers[l].weight, f);
      const Vector db = oracle::central_diff(p.layers[l].bias, f);
      // a near-zero block is judged by its absolute error, where round-off dominates
      EXPECT_TRUE(oracle::rel_err(grad.layers[l].weight, dw) < 1e-6 ||
                  (grad.layers[l].weight - dw).norm() < 1e-9)
          << "trial " << trial;
      EXPECT_TRUE(oracle::rel_err(grad.layers[l].bias, db) < 1e-6 ||
                  (grad.layers[l].bias - db).norm() < 1e-9)
          << "trial " << trial;
    }
  }
}

TEST(Backbone, InitIsSeededAndValid) {
  std::mt19937_64 a(5), b(5);
  const std::vector<std::size_t> hidden{4};
  const auto p = ModelParams::init(3, hidden, 2, false, a);
  const auto q = ModelParams::init(3, hidden, 2, false, b);
  EXPECT_EQ(p.layers[0].weight, q.layers[0].weight);
  EXPECT_EQ(p.num_parameters(), 3u * 4 + 4 + 4 * 2 + 2);
  EXPECT_NO_THROW(p.validate());
  const std::vector<std::size_t> bad{0};
  EXPECT_THROW((void)ModelParams::init(3, bad, 2, false, a), ValidationError);
}

TEST(Sgd, LearningRateDrops) {
  SgdConfig opt;
  EXPECT_DOUBLE_EQ(lr_at(opt, 1), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(opt, 4), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(opt, 5), 0.1 * 1e-1);
  EXPECT_DOUBLE_EQ(lr_at(opt, 10), 0.1 * 1e-2);
  EXPECT_DOUBLE_EQ(lr_at(opt, 20), 0.1 * 1e-3);
}

TEST(Sgd, MatchesUnrolledRecurrence) {
  std::mt19937_64 rng(3);
  Matrix w = oracle::random_vector(6, rng);
  Matrix v = Matrix::Zero(6, 1);
  Matrix w_ref = w, v_ref = v;
  const double lr = 0.05, mu = 0.9, wd = 1e-3;
  for (int step = 0; step < 5; ++step) {
    const Matrix g = oracle::random_vector(6, rng);
    sgd_update(w, v, g, lr, mu, wd);
    for (Index i = 0; i < 6; ++i) {
      v_ref(i) = mu * v_ref(i) + g(i) + wd * w_ref(i);
      w_ref(i) = w_ref(i) - lr * v_ref(i);
    }
  }
  EXPECT_LT((w - w_ref).norm(), 1e-15);
  EXPECT_LT((v - v_ref).norm(), 1e-15);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.tau = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = TrainConfig{};
  c.drop_every = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = TrainConfig{};
  c.optimizer.lr0 = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config(TrainMode::Bbs);
  c.batch_size = 10000;
  EXPECT_THROW((void)train(c, small_split()), ValidationError);
}

TEST(Train, LogCarriesScheduleAndLearningRate) {
  auto c = small_config(TrainMode::Bbs);
  c.epochs = 6;
  c.drop_every = 2;
  c.optimizer.lr_drop_epochs = {4};
  const auto r = train(c, small_split());
  ASSERT_EQ(r.log.size(), 6u);
  const double expected_r[] = {1.0, 4.0 / 6, 4.0 / 6, 2.0 / 6, 2.0 / 6, 0.0};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(r.log[i].epoch, i + 1);
    ASSERT_TRUE(r.log[i].ratio.has_value());
    EXPECT_NEAR(*r.log[i].ratio, expected_r[i], 1e-15);
    EXPECT_DOUBLE_EQ(r.log[i].lr, i + 1 >= 4 ? 0.01 : 0.1);
    EXPECT_TRUE(std::isfinite(r.log[i].mean_loss));
  }
  c.mode = TrainMode::Baseline2;
  for (const auto& e : train(c, small_split()).log) EXPECT_FALSE(e.ratio.has_value());
}

TEST(Train, Deterministic) {
  for (auto mode : {TrainMode::Baseline1, TrainMode::Bbs, TrainMode::ParallelBbs}) {
    auto c = small_config(mode);
    c.shards = 3;
    const auto a = train(c, small_split());
    const auto b = train(c, small_split());
    EXPECT_EQ(all_batch_losses(a), all_batch_losses(b)) << to_string(mode);
    EXPECT_EQ(a.classifier.weights, b.classifier.weights);
  }
}

TEST(Train, SingleBasketModesCoincide) {
  const auto data = as_single_basket(gen_synthetic(10, 4, 5, 0.2, 4));
  const auto b1 = train(small_config(TrainMode::Baseline1), data);
  for (auto mode : {TrainMode::Baseline2, TrainMode::Bbs, TrainMode::ParallelBbs}) {
    const auto r = train(small_config(mode), data);
    EXPECT_EQ(all_batch_losses(r), all_batch_losses(b1)) << to_string(mode);
    EXPECT_EQ(r.model.layers[0].weight, b1.model.layers[0].weight) << to_string(mode);
  }
}

TEST(Train, FullIgnoreEpochEqualsBaseline2) {
  // With t_r = 2 and T = 4 the first epoch ignores every cross-basket center.
  auto c = small_config(TrainMode::Bbs);
  c.drop_every = 2;
  const auto bbs_run = train(c, small_split());
  ASSERT_DOUBLE_EQ(*bbs_run.log[0].ratio, 1.0);
  c.mode = TrainMode::Baseline2;
  const auto b2 = train(c, small_split());
  EXPECT_EQ(bbs_run.log[0].batch_losses, b2.log[0].batch_losses);
  EXPECT_NE(bbs_run.log[2].batch_losses, b2.log[2].batch_losses);
}

TEST(Train, ParallelSingleShardMatchesSerial) {
  auto c = small_config(TrainMode::Bbs);
  const auto serial = train(c, small_split());
  c.mode = TrainMode::ParallelBbs;
  c.shards = 1;
  const auto parallel = train(c, small_split());
  EXPECT_EQ(all_batch_losses(parallel), all_batch_losses(serial));
  EXPECT_EQ(parallel.classifier.weights, serial.classifier.weights);
}

TEST(Train, ParallelShardCountsAgreeWhileEverythingIsIgnored) {
  // Epoch 1 runs at r = 1, where every shard drops all cross-basket centers.
  auto c = small_config(TrainMode::ParallelBbs);
  c.drop_every = 2;
  c.shards = 1;
  const auto ref = train(c, small_split());
  ASSERT_DOUBLE_EQ(*ref.log[0].ratio, 1.0);
  for (std::size_t g : {2u, 3u, 5u}) {
    c.shards = g;
    const auto got = train(c, small_split());
    const auto& a = got.log[0].batch_losses;
    const auto& b = ref.log[0].batch_losses;
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9) << "G=" << g;
    for (const auto& e : got.log) EXPECT_TRUE(std::isfinite(e.mean_loss));
  }
}

TEST(Train, LossDecreases) {
  auto c = small_config(TrainMode::Baseline1);
  c.loss = LossConfig::make(LossMethod::Softmax, 1.0, 0.0, true);
  c.epochs = 15;
  c.optimizer.lr0 = 0.02;
  c.optimizer.lr_drop_epochs = {12};
  const auto data = as_single_basket(gen_synthetic(8, 8, 6, 0.1, 6));
  const auto r = train(c, data);
  EXPECT_LT(r.log.back().mean_loss, 0.5 * r.log.front().mean_loss);
  for (std::size_t e = 2; e < r.log.size(); ++e) {
    EXPECT_LE(r.log[e].mean_loss, r.log[e - 1].mean_loss * 1.05) << "epoch " << e + 1;
  }
}

TEST(Train, DivergenceIsReported) {
  auto c = small_config(TrainMode::Baseline1);
  c.loss = LossConfig::make(LossMethod::Softmax, 1.0, 0.0, true);
  c.optimizer.lr0 = 1e200;
  c.optimizer.lr_drop_epochs = {};
  c.epochs = 10;
  EXPECT_THROW((void)train(c, small_split()), TrainingError);
}

TEST(Train, TrainingSamplesCarryOwners) {
  const auto data = small_split();
  const auto samples = training_samples(data);
  ASSERT_EQ(samples.size(), data.num_samples());
  std::size_t i = 0;
  for (std::size_t m = 0; m < data.baskets.size(); ++m) {
    for (const auto& s : data.baskets[m].samples) {
      EXPECT_EQ(samples[i].owner, (Owner{m + 1, s.local_label}));
      EXPECT_EQ(samples[i].global_class, s.global_class);
      EXPECT_FLOAT_EQ(static_cast<float>(samples[i].feature(0)), s.feature[0]);
      ++i;
    }
  }
}

TEST(GradCheck, RelativeErrorDefinition) {
  Matrix a(2, 1), b(2, 1);
  a << 1, 0;
  b << 1, 0;
  EXPECT_EQ(gradient_rel_error(a, b), 0.0);
  EXPECT_EQ(gradient_rel_error(Matrix::Zero(2, 1), Matrix::Zero(2, 1)), 0.0);
  b << 0, 1;
  EXPECT_DOUBLE_EQ(gradient_rel_error(a, b), std::sqrt(2.0) / 2.0);
}

TEST(GradCheck, PassesAcrossModes) {
  const auto data = split_dataset(gen_synthetic(6, 2, 4, 0.3, 1), {overlap_probs(0.5), 2});
  for (auto mode : {TrainMode::Baseline1, TrainMode::Baseline2, TrainMode::Bbs, TrainMode::ParallelBbs}) {
    for (auto method : {LossMethod::Softmax, LossMethod::ArcFace, LossMethod::SphereFace}) {
      TrainConfig c;
      c.mode = mode;
      c.shards = 2;
      c.tau = 1;
      c.backbone.hidden = {5};
      c.backbone.embed_dim = 3;
      c.loss = method == LossMethod::Softmax    ? LossConfig::make(method, 1.0, 0.0, true)
               : method == LossMethod::ArcFace ? LossConfig::make(method, 16.0, 0.1)
                                               : LossConfig::make(method, 1.0, 2.0);
      const auto report = grad_check(c, data, 1e-5);
      EXPECT_TRUE(report.passed) << to_string(mode) << " " << to_string(method) << " "
                                 << report.max_rel_error;
      EXPECT_LE(report.num_parameters, 1000u);
    }
  }
}

TEST(GradCheck, RejectsLargeInstances) {
  TrainConfig c;
  c.backbone.hidden = {64};
  EXPECT_THROW((void)grad_check(c, small_split(), 1e-5), ValidationError);
}
