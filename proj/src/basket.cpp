#include "bbs/basket.hpp"

#include "bbs/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace bbs {

namespace {

void check_basket(const LabelSpace& space, std::size_t basket) {
  if (basket < 1 || basket > space.num_baskets()) {
    throw ValidationError("basket " + std::to_string(basket) + " outside 1.." +
                          std::to_string(space.num_baskets()));
  }
}

void check_inputs(const LabelSpace& space, const Classifier& clf, const Owner& owner) {
  if (static_cast<std::size_t>(clf.num_classes()) != space.total()) {
    throw ValidationError("classifier has " + std::to_string(clf.num_classes()) +
                          " columns but the label space has " + std::to_string(space.total()));
  }
  check_basket(space, owner.basket);
  if (owner.local < 1 || owner.local > space.basket_size(owner.basket)) {
    throw ValidationError("local label " + std::to_string(owner.local) + " outside basket " +
                          std::to_string(owner.basket));
  }
}

void check_mask(const LabelSpace& space, const Owner& owner, const NegativeMask& mask) {
  if (!(mask.owner() == owner)) {
    throw ValidationError("negative mask was built for a different sample owner");
  }
  if (mask.size() != space.total() || !(mask.owner_range() == space.basket_range(owner.basket))) {
    throw ValidationError("negative mask does not match the label space");
  }
}

}  // namespace

LabelSpace build_label_space(std::span<const std::size_t> basket_sizes) {
  if (basket_sizes.empty()) throw ValidationError("label space needs at least one basket");
  LabelSpace space;
  std::size_t running = 0;
  for (std::size_t i = 0; i < basket_sizes.size(); ++i) {
    if (basket_sizes[i] == 0) {
      throw ValidationError("basket " + std::to_string(i + 1) + " has zero classes");
    }
    space.sizes_.push_back(basket_sizes[i]);
    space.offsets_.push_back(running);
    running += basket_sizes[i];
  }
  space.total_ = running;
  return space;
}

std::size_t LabelSpace::basket_size(std::size_t basket) const {
  check_basket(*this, basket);
  return sizes_[basket - 1];
}

std::size_t LabelSpace::offset(std::size_t basket) const {
  check_basket(*this, basket);
  return offsets_[basket - 1];
}

std::size_t LabelSpace::network_id(std::size_t basket, std::size_t local) const {
  check_basket(*this, basket);
  if (local < 1 || local > sizes_[basket - 1]) {
    throw ValidationError("local label " + std::to_string(local) + " outside basket " +
                          std::to_string(basket));
  }
  return offsets_[basket - 1] + local;
}

Owner LabelSpace::locate(std::size_t network_id) const {
  if (network_id < 1 || network_id > total_) {
    throw ValidationError("network id " + std::to_string(network_id) + " outside 1.." +
                          std::to_string(total_));
  }
  const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), network_id - 1);
  const auto basket = static_cast<std::size_t>(it - offsets_.begin());
  return {basket, network_id - offsets_[basket - 1]};
}

IdRange LabelSpace::basket_range(std::size_t basket) const {
  check_basket(*this, basket);
  return {offsets_[basket - 1] + 1, offsets_[basket - 1] + sizes_[basket - 1]};
}

NegativeMask NegativeMask::for_owner(const LabelSpace& space, const Owner& owner,
                                     bool cross_value) {
  const IdRange own = space.basket_range(owner.basket);
  const std::size_t target = space.network_id(owner);
  std::vector<std::uint8_t> bits(space.total(), cross_value ? 1 : 0);
  for (std::size_t id = own.first; id <= own.last; ++id) bits[id - 1] = 1;
  bits[target - 1] = 0;
  return NegativeMask(owner, own, std::move(bits));
}

void NegativeMask::set(std::size_t network_id, bool value) {
  if (network_id < 1 || network_id > bits_.size()) {
    throw ValidationError("network id " + std::to_string(network_id) + " outside mask");
  }
  if (owner_range_.contains(network_id)) {
    throw ValidationError("bits inside the owner's basket are fixed");
  }
  bits_[network_id - 1] = value ? 1 : 0;
}

std::size_t NegativeMask::cross_zeros() const {
  std::size_t zeros = 0;
  for (std::size_t id = 1; id <= bits_.size(); ++id) {
    if (!owner_range_.contains(id) && bits_[id - 1] == 0) ++zeros;
  }
  return zeros;
}

void MiningSchedule::validate(std::size_t num_baskets) const {
  if (drop_every == 0) throw ValidationError("t_r (drop_every) must be positive");
  if (total_epochs == 0) throw ValidationError("total epochs T must be positive");
  if (tau.size() != num_baskets) {
    throw ValidationError("need one tau per basket (" + std::to_string(num_baskets) + "), got " +
                          std::to_string(tau.size()));
  }
  for (auto t : tau) {
    if (t < 1) throw ValidationError("tau must be at least 1");
  }
}

double schedule_ratio(const MiningSchedule& sched, std::size_t epoch) {
  if (sched.drop_every == 0 || sched.total_epochs == 0) {
    throw ValidationError("schedule needs positive t_r and T");
  }
  if (epoch < 1 || epoch > sched.total_epochs) {
    throw ValidationError("epoch " + std::to_string(epoch) + " outside 1.." +
                          std::to_string(sched.total_epochs));
  }
  const std::size_t remaining = sched.total_epochs - epoch;
  const std::size_t steps = (remaining + sched.drop_every - 1) / sched.drop_every;
  const double ratio = static_cast<double>(steps * sched.drop_every) /
                       static_cast<double>(sched.total_epochs);
  return std::min(1.0, ratio);
}

std::size_t ignored_count(std::size_t basket_size, std::size_t tau, double ratio) {
  // The small slack keeps products such as 10 * 0.3 from rounding up to 4.
  const double scaled = static_cast<double>(basket_size) * ratio;
  const auto by_ratio = static_cast<std::size_t>(std::max(0.0, std::ceil(scaled - 1e-9)));
  return std::min(basket_size, std::max(tau, by_ratio));
}

std::vector<std::size_t> ignored_counts(const LabelSpace& space, const MiningSchedule& sched,
                                        double ratio) {
  sched.validate(space.num_baskets());
  std::vector<std::size_t> out(space.num_baskets());
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = ignored_count(space.sizes()[k], sched.tau[k], ratio);
  }
  return out;
}

std::vector<std::size_t> select_most_similar(std::span<const double> scores, std::size_t count) {
  count = std::min(count, scores.size());
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (count == 0) return {};
  const auto before = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  if (count < order.size()) {
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count - 1),
                     order.end(), before);
  }
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

NegativeMask mining_mask(const LabelSpace& space, const LossConfig& cfg, const Classifier& clf,
                         const Eigen::Ref<const Vector>& x, const Owner& owner,
                         std::span<const std::size_t> ignored) {
  check_inputs(space, clf, owner);
  if (ignored.size() != space.num_baskets()) {
    throw ValidationError("need one ignored count per basket");
  }
  NegativeMask mask = NegativeMask::for_owner(space, owner, true);
  std::vector<double> scores;
  for (std::size_t k = 1; k <= space.num_baskets(); ++k) {
    if (k == owner.basket) continue;
    const std::size_t n = space.basket_size(k);
    if (ignored[k - 1] > n) {
      throw ValidationError("ignored count exceeds the size of basket " + std::to_string(k));
    }
    const std::size_t offset = space.offset(k);
    scores.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      const auto col = static_cast<Index>(offset + j);
      scores[j] = similarity_g(cfg, clf.weights.col(col), 0.0, x);
    }
    for (auto pos : select_most_similar(scores, ignored[k - 1])) {
      mask.set(offset + pos + 1, false);
    }
  }
  return mask;
}

double bbs_loss_accumulate(const LabelSpace& space, const LossConfig& cfg, const Classifier& clf,
                           const Eigen::Ref<const Vector>& x, const Owner& owner,
                           const NegativeMask& mask, double weight, ClassifierGrad& grad,
                           Eigen::Ref<Vector> d_x) {
  check_inputs(space, clf, owner);
  check_mask(space, owner, mask);
  const auto target = static_cast<Index>(space.network_id(owner) - 1);
  std::vector<double> logits(space.total());
  const auto fwd = forward_block(cfg, clf, x, mask.bits(), target, logits);
  const PartialSum parts[] = {fwd.partial};
  const double lse = combine_partials(parts);
  backward_block(cfg, clf, x, mask.bits(), target, logits, lse, weight, grad, d_x);
  return lse - *fwd.target_logit;
}

double bbs_loss(const LabelSpace& space, const LossConfig& cfg, const Classifier& clf,
                const Eigen::Ref<const Vector>& x, const Owner& owner, const NegativeMask& mask) {
  check_inputs(space, clf, owner);
  check_mask(space, owner, mask);
  const auto target = static_cast<Index>(space.network_id(owner) - 1);
  std::vector<double> logits(space.total());
  const auto fwd = forward_block(cfg, clf, x, mask.bits(), target, logits);
  const PartialSum parts[] = {fwd.partial};
  return combine_partials(parts) - *fwd.target_logit;
}

LossGrad bbs_loss_grad(const LabelSpace& space, const LossConfig& cfg, const Classifier& clf,
                       const Eigen::Ref<const Vector>& x, const Owner& owner,
                       const NegativeMask& mask) {
  ClassifierGrad grad(clf.dim(), clf.num_classes());
  Vector d_x = Vector::Zero(x.size());
  bbs_loss_accumulate(space, cfg, clf, x, owner, mask, 1.0, grad, d_x);
  return {std::move(d_x), std::move(grad.weights), std::move(grad.bias)};
}

}  // namespace bbs
