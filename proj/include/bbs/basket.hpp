#pragma once

#include "bbs/loss.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace bbs {

/// A (basket, local label) pair. Both are 1-based.
struct Owner {
  std::size_t basket = 1;
  std::size_t local = 1;
  friend bool operator==(const Owner&, const Owner&) = default;
};

/// Closed interval of 1-based network ids.
struct IdRange {
  std::size_t first = 1;
  std::size_t last = 0;
  [[nodiscard]] std::size_t size() const { return last >= first ? last - first + 1 : 0; }
  [[nodiscard]] bool empty() const { return last < first; }
  [[nodiscard]] bool contains(std::size_t id) const { return id >= first && id <= last; }
  friend bool operator==(const IdRange&, const IdRange&) = default;
};

/// Concatenated label space of several baskets. Basket m's local label l maps to
/// network id offset(m) + l, where offset is the exclusive prefix sum of basket sizes.
class LabelSpace {
 public:
  LabelSpace() = default;

  [[nodiscard]] std::size_t num_baskets() const { return sizes_.size(); }
  [[nodiscard]] std::size_t total() const { return total_; }
  [[nodiscard]] std::size_t basket_size(std::size_t basket) const;
  [[nodiscard]] std::size_t offset(std::size_t basket) const;
  [[nodiscard]] const std::vector<std::size_t>& sizes() const { return sizes_; }
  [[nodiscard]] const std::vector<std::size_t>& offsets() const { return offsets_; }

  [[nodiscard]] std::size_t network_id(std::size_t basket, std::size_t local) const;
  [[nodiscard]] std::size_t network_id(const Owner& owner) const {
    return network_id(owner.basket, owner.local);
  }
  [[nodiscard]] Owner locate(std::size_t network_id) const;
  [[nodiscard]] IdRange basket_range(std::size_t basket) const;

  friend LabelSpace build_label_space(std::span<const std::size_t> basket_sizes);

 private:
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
};

/// Throws ValidationError on an empty list or a zero size.
[[nodiscard]] LabelSpace build_label_space(std::span<const std::size_t> basket_sizes);

/// Per-sample negative indicator over all network ids. The owner's basket is always
/// included except for the target itself, which the loss treats separately.
class NegativeMask {
 public:
  /// Owner basket set to 1 (target 0); every other basket set to `cross_value`.
  static NegativeMask for_owner(const LabelSpace& space, const Owner& owner, bool cross_value);

  [[nodiscard]] const Owner& owner() const { return owner_; }
  [[nodiscard]] const IdRange& owner_range() const { return owner_range_; }
  [[nodiscard]] std::size_t size() const { return bits_.size(); }
  [[nodiscard]] bool included(std::size_t network_id) const { return bits_.at(network_id - 1) != 0; }
  /// Sets a cross-basket bit; throws ValidationError for ids in the owner's basket.
  void set(std::size_t network_id, bool value);
  [[nodiscard]] std::span<const std::uint8_t> bits() const { return bits_; }
  /// Number of zero bits outside the owner's basket.
  [[nodiscard]] std::size_t cross_zeros() const;

  friend bool operator==(const NegativeMask&, const NegativeMask&) = default;

 private:
  NegativeMask(Owner owner, IdRange owner_range, std::vector<std::uint8_t> bits)
      : owner_(owner), owner_range_(owner_range), bits_(std::move(bits)) {}

  Owner owner_;
  IdRange owner_range_;
  std::vector<std::uint8_t> bits_;
};

struct MiningSchedule {
  std::vector<std::size_t> tau;  // minimum ignored count per basket
  std::size_t drop_every = 2;    // t_r, in epochs
  std::size_t total_epochs = 20; // T

  void validate(std::size_t num_baskets) const;
};

/// Ignored ratio for 1-based epoch t: ceil((T - t) / t_r) * t_r / T, capped at 1.
[[nodiscard]] double schedule_ratio(const MiningSchedule& sched, std::size_t epoch);

/// d = min(N, max(tau, ceil(N * r))).
[[nodiscard]] std::size_t ignored_count(std::size_t basket_size, std::size_t tau, double ratio);

/// Ignored counts for every basket at the given ratio.
[[nodiscard]] std::vector<std::size_t> ignored_counts(const LabelSpace& space,
                                                      const MiningSchedule& sched, double ratio);

/// Positions of the `count` largest scores; equal scores prefer the lower position.
/// Returned positions are sorted ascending.
[[nodiscard]] std::vector<std::size_t> select_most_similar(std::span<const double> scores,
                                                           std::size_t count);

/// For every basket k != owner.basket, excludes the ignored[k-1] most similar class centers.
[[nodiscard]] NegativeMask mining_mask(const LabelSpace& space, const LossConfig& cfg,
                                       const Classifier& clf, const Eigen::Ref<const Vector>& x,
                                       const Owner& owner, std::span<const std::size_t> ignored);

[[nodiscard]] double bbs_loss(const LabelSpace& space, const LossConfig& cfg, const Classifier& clf,
                              const Eigen::Ref<const Vector>& x, const Owner& owner,
                              const NegativeMask& mask);

[[nodiscard]] LossGrad bbs_loss_grad(const LabelSpace& space, const LossConfig& cfg,
                                     const Classifier& clf, const Eigen::Ref<const Vector>& x,
                                     const Owner& owner, const NegativeMask& mask);

/// Loss plus `weight * gradient` accumulated into `grad` and `d_x`. The mask is a constant.
double bbs_loss_accumulate(const LabelSpace& space, const LossConfig& cfg, const Classifier& clf,
                           const Eigen::Ref<const Vector>& x, const Owner& owner,
                           const NegativeMask& mask, double weight, ClassifierGrad& grad,
                           Eigen::Ref<Vector> d_x);

}  // namespace bbs
