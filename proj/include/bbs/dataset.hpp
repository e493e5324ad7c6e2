#pragma once

#include "bbs/basket.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bbs {

/// A sample before splitting: a feature and its ground-truth identity.
struct LabeledSample {
  std::vector<float> feature;
  std::uint32_t global_class = 0;
};

struct LabeledSet {
  std::uint32_t dim = 0;
  std::vector<LabeledSample> samples;
};

/// A sample inside a basket. Local labels are 1-based and contiguous per basket.
struct Sample {
  std::vector<float> feature;
  std::uint32_t global_class = 0;
  std::uint32_t local_label = 0;
};

struct Basket {
  /// local_to_global[l - 1] is the identity behind local label l.
  std::vector<std::uint32_t> local_to_global;
  std::vector<Sample> samples;

  [[nodiscard]] std::size_t num_classes() const { return local_to_global.size(); }
};

struct BasketSet {
  std::uint32_t dim = 0;
  std::vector<Basket> baskets;

  /// Throws ValidationError if labels are not contiguous, a local label maps to two
  /// identities, an identity appears under two labels in one basket, or dimensions differ.
  void validate() const;
  [[nodiscard]] std::size_t num_samples() const;
  /// Requires every basket to hold at least one class.
  [[nodiscard]] LabelSpace label_space() const;
};

struct SplitSpec {
  std::vector<double> probs;  // probs[l-1]: chance that a class lands in l baskets
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t parts() const { return probs.size(); }
  void validate() const;
};

/// Distributes each identity over a random number of distinct baskets.
[[nodiscard]] BasketSet split_dataset(const LabeledSet& data, const SplitSpec& spec);

/// Two-part probabilities [1 - ratio, ratio]; the expected Jaccard overlap equals ratio.
[[nodiscard]] std::vector<double> overlap_probs(double ratio);

/// p_i = 2 / (3^k - 1) * 3^(k - i), so that p_i = 3 p_{i+1}.
[[nodiscard]] std::vector<double> geometric_probs(std::size_t parts);

/// |A ∩ B| / |A ∪ B| over the identities of two baskets.
[[nodiscard]] double overlap_ratio(const Basket& a, const Basket& b);
/// |A ∩ B| / |A|.
[[nodiscard]] double containment_ratio(const Basket& a, const Basket& b);
/// Mean of overlap_ratio over all unordered basket pairs.
[[nodiscard]] double mean_pairwise_overlap(const BasketSet& set);

/// Unit-sphere class centers plus isotropic Gaussian noise, renormalized to unit length.
/// Identities are numbered 1..num_classes; samples are grouped by class.
[[nodiscard]] LabeledSet gen_synthetic(std::size_t num_classes, std::size_t samples_per_class,
                                       std::size_t dim, double spread, std::uint64_t seed);

/// One basket holding every identity, local label = rank of the identity.
[[nodiscard]] BasketSet as_single_basket(const LabeledSet& data);
/// Drops basket structure.
[[nodiscard]] LabeledSet flatten(const BasketSet& set);

/// Keeps the identities for which keep(global_class) is true.
template <typename Pred>
[[nodiscard]] LabeledSet filter_classes(const LabeledSet& data, Pred keep) {
  LabeledSet out{data.dim, {}};
  for (const auto& s : data.samples) {
    if (keep(s.global_class)) out.samples.push_back(s);
  }
  return out;
}

/// Binary basket file ("BBS1", little-endian).
void save_baskets(const std::filesystem::path& path, const BasketSet& set);
[[nodiscard]] BasketSet load_baskets(const std::filesystem::path& path,
                                     std::optional<std::uint32_t> expected_dim = std::nullopt);

}  // namespace bbs
