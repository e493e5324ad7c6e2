#include "bbs/parallel.hpp"

#include "bbs/error.hpp"

#include <algorithm>
#include <string>

namespace bbs {

ShardLayout shard_layout(std::size_t total, std::size_t num_shards) {
  if (total == 0) throw ValidationError("shard layout needs at least one class");
  if (num_shards == 0) throw ValidationError("shard layout needs at least one shard");
  ShardLayout layout;
  layout.total = total;
  layout.chunk = (total + num_shards - 1) / num_shards;
  for (std::size_t g = 0; g < num_shards; ++g) {
    const std::size_t first = g * layout.chunk + 1;
    const std::size_t last = std::min((g + 1) * layout.chunk, total);
    // Shards past the end get an empty range anchored after the last id.
    layout.ranges.push_back(first <= total ? IdRange{first, last} : IdRange{total + 1, total});
  }
  return layout;
}

std::size_t ShardLayout::shard_of(std::size_t network_id) const {
  if (network_id < 1 || network_id > total) {
    throw ValidationError("network id " + std::to_string(network_id) + " outside 1.." +
                          std::to_string(total));
  }
  return (network_id - 1) / chunk;
}

std::vector<ShardSegment> shard_segments(const ShardLayout& layout, const LabelSpace& space,
                                         std::size_t exclude_basket) {
  if (exclude_basket < 1 || exclude_basket > space.num_baskets()) {
    throw ValidationError("basket " + std::to_string(exclude_basket) + " outside 1.." +
                          std::to_string(space.num_baskets()));
  }
  if (layout.total != space.total()) {
    throw ValidationError("shard layout and label space disagree on the number of classes");
  }
  std::vector<ShardSegment> out;
  for (std::size_t g = 0; g < layout.num_shards(); ++g) {
    const IdRange shard = layout.ranges[g];
    if (shard.empty()) continue;
    for (std::size_t k = 1; k <= space.num_baskets(); ++k) {
      if (k == exclude_basket) continue;
      const IdRange basket = space.basket_range(k);
      const IdRange cut{std::max(shard.first, basket.first), std::min(shard.last, basket.last)};
      if (!cut.empty()) out.push_back({g, k, cut});
    }
  }
  return out;
}

std::vector<std::uint8_t> shard_mask(const ShardSegment& segment, const LossConfig& cfg,
                                     const Classifier& block, std::size_t block_first,
                                     const Eigen::Ref<const Vector>& x, std::size_t tau,
                                     double ratio) {
  if (segment.range.empty()) throw ValidationError("shard segment is empty");
  const std::size_t block_last = block_first + static_cast<std::size_t>(block.num_classes()) - 1;
  if (segment.range.first < block_first || segment.range.last > block_last) {
    throw ValidationError("shard segment lies outside the supplied classifier block");
  }
  const std::size_t len = segment.range.size();
  std::vector<double> scores(len);
  for (std::size_t j = 0; j < len; ++j) {
    const auto col = static_cast<Index>(segment.range.first - block_first + j);
    scores[j] = similarity_g(cfg, block.weights.col(col), 0.0, x);
  }
  std::vector<std::uint8_t> bits(len, 1);
  for (auto pos : select_most_similar(scores, ignored_count(len, tau, ratio))) bits[pos] = 0;
  return bits;
}

ShardedClassifier ShardedClassifier::scatter(const Classifier& clf, const ShardLayout& layout) {
  if (static_cast<std::size_t>(clf.num_classes()) != layout.total) {
    throw ValidationError("classifier width does not match the shard layout");
  }
  ShardedClassifier out;
  out.layout = layout;
  for (const auto& r : layout.ranges) {
    const auto first = static_cast<Index>(r.first - 1);
    const auto n = static_cast<Index>(r.size());
    Classifier shard;
    shard.weights = clf.weights.middleCols(first, n);
    shard.bias = clf.bias.segment(first, n);
    out.shards.push_back(std::move(shard));
  }
  return out;
}

Classifier ShardedClassifier::gather() const {
  if (shards.empty()) return {};
  Classifier out(shards.front().dim(), static_cast<Index>(layout.total));
  for (std::size_t g = 0; g < shards.size(); ++g) {
    const auto& r = layout.ranges[g];
    if (r.empty()) continue;
    const auto first = static_cast<Index>(r.first - 1);
    out.weights.middleCols(first, shards[g].num_classes()) = shards[g].weights;
    out.bias.segment(first, shards[g].num_classes()) = shards[g].bias;
  }
  return out;
}

std::vector<ClassifierGrad> zero_shard_grads(const ShardedClassifier& clf) {
  std::vector<ClassifierGrad> out;
  out.reserve(clf.shards.size());
  for (const auto& s : clf.shards) out.emplace_back(s.dim(), s.num_classes());
  return out;
}

ShardWorkers::ShardWorkers(std::size_t count) : count_(count), errors_(count) {
  if (count == 0) throw ValidationError("need at least one shard worker");
  // A single worker runs on the calling thread.
  if (count == 1) return;
  threads_.reserve(count);
  for (std::size_t i = 0; i < count; ++i) threads_.emplace_back([this, i] { loop(i); });
}

ShardWorkers::~ShardWorkers() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  start_cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void ShardWorkers::run(const std::function<void(std::size_t)>& task) {
  if (threads_.empty()) {
    task(0);
    return;
  }
  {
    std::lock_guard lock(mutex_);
    std::fill(errors_.begin(), errors_.end(), nullptr);
    task_ = &task;
    pending_ = count_;
    ++generation_;
  }
  start_cv_.notify_all();
  {
    std::unique_lock lock(mutex_);
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    task_ = nullptr;
  }
  for (const auto& e : errors_) {
    if (e) std::rethrow_exception(e);
  }
}

void ShardWorkers::loop(std::size_t index) {
  std::size_t seen = 0;
  std::unique_lock lock(mutex_);
  while (true) {
    start_cv_.wait(lock, [&] { return stopping_ || generation_ != seen; });
    if (stopping_) return;
    seen = generation_;
    const auto* task = task_;
    lock.unlock();
    try {
      (*task)(index);
    } catch (...) {
      errors_[index] = std::current_exception();
    }
    lock.lock();
    if (--pending_ == 0) done_cv_.notify_one();
  }
}

ParallelBbs::ParallelBbs(LabelSpace space, ShardLayout layout, LossConfig cfg)
    : space_(std::move(space)),
      layout_(std::move(layout)),
      cfg_(cfg),
      state_(layout_.num_shards()),
      workers_(layout_.num_shards()) {
  cfg_.validate();
  for (std::size_t m = 1; m <= space_.num_baskets(); ++m) {
    segments_by_basket_.push_back(shard_segments(layout_, space_, m));
  }
  for (std::size_t g = 0; g < layout_.num_shards(); ++g) {
    state_[g].bits.resize(layout_.ranges[g].size());
    state_[g].logits.resize(layout_.ranges[g].size());
  }
}

void ParallelBbs::check(const ShardedClassifier& clf, std::size_t target,
                        std::size_t basket) const {
  if (clf.layout.total != layout_.total || clf.shards.size() != layout_.num_shards() ||
      clf.layout.chunk != layout_.chunk) {
    throw ValidationError("sharded classifier does not match the engine's shard layout");
  }
  const IdRange own = space_.basket_range(basket);
  if (!own.contains(target)) {
    throw ValidationError("target network id " + std::to_string(target) +
                          " is not in basket " + std::to_string(basket));
  }
}

void ParallelBbs::prepare_bits(std::size_t g, const ShardedClassifier& clf,
                               const Eigen::Ref<const Vector>& x, const Request& req) {
  const IdRange range = layout_.ranges[g];
  auto& bits = state_[g].bits;
  if (req.mask != nullptr) {
    const auto all = req.mask->bits();
    std::copy_n(all.begin() + static_cast<std::ptrdiff_t>(range.first - 1), range.size(),
                bits.begin());
    return;
  }
  std::fill(bits.begin(), bits.end(), std::uint8_t{1});
  if (range.contains(req.target)) bits[req.target - range.first] = 0;
  for (const auto& seg : segments_by_basket_[req.basket - 1]) {
    if (seg.shard != g) continue;
    const auto part = shard_mask(seg, cfg_, clf.shards[g], range.first, x,
                                 req.mining.tau[seg.basket - 1], req.mining.ratio);
    std::copy(part.begin(), part.end(),
              bits.begin() + static_cast<std::ptrdiff_t>(seg.range.first - range.first));
  }
}

double ParallelBbs::run(const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
                        const Request& req, double weight, std::vector<ClassifierGrad>* grads,
                        Eigen::Ref<Vector>* d_x) {
  check(clf, req.target, req.basket);
  if (req.mask == nullptr && req.mining.tau.size() != space_.num_baskets()) {
    throw ValidationError("need one tau per basket");
  }
  const auto local_target = [&](std::size_t g) -> std::optional<Index> {
    const IdRange r = layout_.ranges[g];
    if (!r.contains(req.target)) return std::nullopt;
    return static_cast<Index>(req.target - r.first);
  };

  workers_.run([&](std::size_t g) {
    prepare_bits(g, clf, x, req);
    state_[g].forward =
        forward_block(cfg_, clf.shards[g], x, state_[g].bits, local_target(g), state_[g].logits);
  });

  // Gather in shard order.
  std::vector<PartialSum> parts;
  parts.reserve(state_.size());
  for (const auto& s : state_) parts.push_back(s.forward.partial);
  const double lse = combine_partials(parts);
  const double target_logit = *state_[layout_.shard_of(req.target)].forward.target_logit;

  if (grads != nullptr) {
    if (grads->size() != layout_.num_shards()) {
      throw ValidationError("need one gradient buffer per shard");
    }
    workers_.run([&](std::size_t g) {
      auto& st = state_[g];
      st.d_x = Vector::Zero(x.size());
      backward_block(cfg_, clf.shards[g], x, st.bits, local_target(g), st.logits, lse, weight,
                     (*grads)[g], st.d_x);
    });
    for (const auto& s : state_) *d_x += s.d_x;
  }
  return lse - target_logit;
}

double ParallelBbs::loss(const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
                         std::size_t target, std::size_t basket, MiningInputs mining) {
  return run(clf, x, {target, basket, mining, nullptr}, 0.0, nullptr, nullptr);
}

double ParallelBbs::loss(const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
                         const NegativeMask& mask) {
  if (mask.size() != space_.total()) throw ValidationError("mask length does not match");
  const Request req{space_.network_id(mask.owner()), mask.owner().basket, {}, &mask};
  return run(clf, x, req, 0.0, nullptr, nullptr);
}

double ParallelBbs::accumulate(const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
                               std::size_t target, std::size_t basket, MiningInputs mining,
                               double weight, std::vector<ClassifierGrad>& grads,
                               Eigen::Ref<Vector> d_x) {
  return run(clf, x, {target, basket, mining, nullptr}, weight, &grads, &d_x);
}

double ParallelBbs::accumulate(const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
                               const NegativeMask& mask, double weight,
                               std::vector<ClassifierGrad>& grads, Eigen::Ref<Vector> d_x) {
  if (mask.size() != space_.total()) throw ValidationError("mask length does not match");
  const Request req{space_.network_id(mask.owner()), mask.owner().basket, {}, &mask};
  return run(clf, x, req, weight, &grads, &d_x);
}

std::vector<std::uint8_t> ParallelBbs::last_mask() const {
  std::vector<std::uint8_t> out;
  out.reserve(layout_.total);
  for (const auto& s : state_) out.insert(out.end(), s.bits.begin(), s.bits.end());
  return out;
}

double parallel_bbs_loss(const LabelSpace& space, const LossConfig& cfg,
                         const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
                         std::size_t target, std::size_t basket, MiningInputs mining) {
  ParallelBbs engine(space, clf.layout, cfg);
  return engine.loss(clf, x, target, basket, mining);
}

ShardedGrad parallel_bbs_grad(const LabelSpace& space, const LossConfig& cfg,
                              const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
                              std::size_t target, std::size_t basket, MiningInputs mining) {
  ParallelBbs engine(space, clf.layout, cfg);
  ShardedGrad out{zero_shard_grads(clf), Vector::Zero(x.size())};
  engine.accumulate(clf, x, target, basket, mining, 1.0, out.shards, out.d_x);
  return out;
}

}  // namespace bbs
