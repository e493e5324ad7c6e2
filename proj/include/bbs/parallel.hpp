#pragma once

#include "bbs/basket.hpp"
#include "bbs/loss.hpp"

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace bbs {

/// Contiguous class-center ranges, one per shard. Shard g (0-based) owns
/// [g*chunk + 1, min((g+1)*chunk, L)] with chunk = ceil(L / G); trailing shards may be empty.
struct ShardLayout {
  std::size_t total = 0;
  std::size_t chunk = 0;
  std::vector<IdRange> ranges;

  [[nodiscard]] std::size_t num_shards() const { return ranges.size(); }
  /// 0-based shard holding a 1-based network id.
  [[nodiscard]] std::size_t shard_of(std::size_t network_id) const;
};

[[nodiscard]] ShardLayout shard_layout(std::size_t total, std::size_t num_shards);

/// Truncated basket: the part of basket `basket` that lives on shard `shard`.
struct ShardSegment {
  std::size_t shard = 0;   // 0-based
  std::size_t basket = 1;  // 1-based
  IdRange range;
  friend bool operator==(const ShardSegment&, const ShardSegment&) = default;
};

/// Non-empty shard/basket intersections for every basket other than `exclude_basket`,
/// ordered by shard then basket.
[[nodiscard]] std::vector<ShardSegment> shard_segments(const ShardLayout& layout,
                                                       const LabelSpace& space,
                                                       std::size_t exclude_basket);

/// Mask bits (one per id in the segment): the min(len, max(tau, ceil(len*r))) most similar
/// centers are 0. `block` holds the centers for ids block_first .. block_first+cols-1.
[[nodiscard]] std::vector<std::uint8_t> shard_mask(const ShardSegment& segment,
                                                   const LossConfig& cfg, const Classifier& block,
                                                   std::size_t block_first,
                                                   const Eigen::Ref<const Vector>& x,
                                                   std::size_t tau, double ratio);

/// Classifier split by a ShardLayout; each shard owns its own columns.
struct ShardedClassifier {
  ShardLayout layout;
  std::vector<Classifier> shards;

  static ShardedClassifier scatter(const Classifier& clf, const ShardLayout& layout);
  [[nodiscard]] Classifier gather() const;
};

struct ShardedGrad {
  std::vector<ClassifierGrad> shards;
  Vector d_x;
};

[[nodiscard]] std::vector<ClassifierGrad> zero_shard_grads(const ShardedClassifier& clf);

/// Fixed pool of shard workers. run() hands worker g the call f(g) and returns when all
/// workers are done; the first exception (in shard order) is rethrown.
class ShardWorkers {
 public:
  explicit ShardWorkers(std::size_t count);
  ~ShardWorkers();
  ShardWorkers(const ShardWorkers&) = delete;
  ShardWorkers& operator=(const ShardWorkers&) = delete;

  [[nodiscard]] std::size_t size() const { return count_; }
  void run(const std::function<void(std::size_t)>& task);

 private:
  void loop(std::size_t index);

  std::size_t count_;
  std::mutex mutex_;
  std::condition_variable start_cv_;
  std::condition_variable done_cv_;
  const std::function<void(std::size_t)>* task_ = nullptr;
  std::size_t generation_ = 0;
  std::size_t pending_ = 0;
  bool stopping_ = false;
  std::vector<std::exception_ptr> errors_;
  std::vector<std::thread> threads_;
};

/// Mining inputs for one sample: per-basket tau and the current ignored ratio.
struct MiningInputs {
  std::span<const std::size_t> tau;
  double ratio = 0.0;
};

/// Model-parallel basket softmax. Each worker mines its truncated baskets, computes a
/// masked partial (max, sum) over its own columns, and the partials are combined in shard
/// order. Worker scratch is reused between calls, so one engine serves one caller at a time.
class ParallelBbs {
 public:
  ParallelBbs(LabelSpace space, ShardLayout layout, LossConfig cfg);

  [[nodiscard]] const ShardLayout& layout() const { return layout_; }
  [[nodiscard]] const LabelSpace& space() const { return space_; }

  /// Mines per shard and returns the loss. `target` is a 1-based network id in `basket`.
  double loss(const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
              std::size_t target, std::size_t basket, MiningInputs mining);
  /// Uses the given mask instead of mining.
  double loss(const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
              const NegativeMask& mask);

  /// Loss plus `weight * gradient`, accumulated into per-shard `grads` and `d_x`.
  double accumulate(const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
                    std::size_t target, std::size_t basket, MiningInputs mining, double weight,
                    std::vector<ClassifierGrad>& grads, Eigen::Ref<Vector> d_x);
  double accumulate(const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x,
                    const NegativeMask& mask, double weight, std::vector<ClassifierGrad>& grads,
                    Eigen::Ref<Vector> d_x);

  /// Mask bits used by the most recent call, stitched across shards (length L).
  [[nodiscard]] std::vector<std::uint8_t> last_mask() const;

 private:
  struct Request {
    std::size_t target;
    std::size_t basket;
    MiningInputs mining;
    const NegativeMask* mask;
  };
  struct ShardState {
    std::vector<std::uint8_t> bits;
    std::vector<double> logits;
    BlockForward forward{};
    Vector d_x;
  };

  double run(const ShardedClassifier& clf, const Eigen::Ref<const Vector>& x, const Request& req,
             double weight, std::vector<ClassifierGrad>* grads, Eigen::Ref<Vector>* d_x);
  void prepare_bits(std::size_t g, const ShardedClassifier& clf,
                    const Eigen::Ref<const Vector>& x, const Request& req);
  void check(const ShardedClassifier& clf, std::size_t target, std::size_t basket) const;

  LabelSpace space_;
  ShardLayout layout_;
  LossConfig cfg_;
  std::vector<std::vector<ShardSegment>> segments_by_basket_;  // [basket-1] -> segments
  std::vector<ShardState> state_;
  ShardWorkers workers_;
};

/// One-shot convenience wrappers around ParallelBbs.
[[nodiscard]] double parallel_bbs_loss(const LabelSpace& space, const LossConfig& cfg,
                                       const ShardedClassifier& clf,
                                       const Eigen::Ref<const Vector>& x, std::size_t target,
                                       std::size_t basket, MiningInputs mining);
[[nodiscard]] ShardedGrad parallel_bbs_grad(const LabelSpace& space, const LossConfig& cfg,
                                            const ShardedClassifier& clf,
                                            const Eigen::Ref<const Vector>& x, std::size_t target,
                                            std::size_t basket, MiningInputs mining);

}  // namespace bbs
