#pragma once

#include "bbs/dataset.hpp"
#include "bbs/loss.hpp"
#include "bbs/model.hpp"

#include <cstdint>
#include <vector>

namespace bbs {

enum class ScoreKind { Cosine, NegEuclidean };

struct EmbeddingPair {
  Vector a;
  Vector b;
  bool genuine = false;
};
using PairSet = std::vector<EmbeddingPair>;

struct Identified {
  Vector embedding;
  std::uint32_t identity = 0;
};

struct RetrievalSet {
  std::vector<Identified> queries;
  std::vector<Identified> gallery;
};

/// Similarity score; higher means more alike for both kinds.
[[nodiscard]] double pair_score(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b,
                                ScoreKind kind = ScoreKind::Cosine);

struct ScoredPair {
  double score;
  bool genuine;
};
[[nodiscard]] std::vector<ScoredPair> score_pairs(const PairSet& pairs,
                                                  ScoreKind kind = ScoreKind::Cosine);

struct TarResult {
  double tar = 0.0;
  double threshold = 0.0;
  /// False when there are fewer than 1/far impostor pairs, so the FAR cannot be resolved.
  bool resolvable = true;
};

/// Pairs with score >= threshold are accepted. The threshold is the smallest value whose
/// impostor acceptance fraction is <= far.
[[nodiscard]] TarResult tar_at_far(std::span<const ScoredPair> scored, double far);
[[nodiscard]] TarResult tar_at_far(const PairSet& pairs, double far,
                                   ScoreKind kind = ScoreKind::Cosine);

/// Best single-threshold accuracy over all midpoints between distinct sorted scores.
[[nodiscard]] double verification_accuracy(std::span<const ScoredPair> scored);
[[nodiscard]] double verification_accuracy(const PairSet& pairs,
                                           ScoreKind kind = ScoreKind::Cosine);

/// Fraction of queries with a same-identity gallery item in the top k (cosine ranking,
/// ties to the lower gallery index).
[[nodiscard]] double cmc_topk(const RetrievalSet& rs, std::size_t k);
/// Mean over queries of average precision across the full ranked gallery.
[[nodiscard]] double mean_ap(const RetrievalSet& rs);

/// Runs a backbone over a labeled set.
[[nodiscard]] std::vector<Identified> embed_all(const ModelParams& model, const LabeledSet& data);

/// Seeded verification pairs: up to `per_kind` genuine pairs (drawn from all same-identity
/// pairs) and `per_kind` impostor pairs.
[[nodiscard]] PairSet make_pairs(const std::vector<Identified>& items, std::size_t per_kind,
                                 std::uint64_t seed);
/// First sample of each identity (with at least two samples) is a query; the rest form
/// the gallery.
[[nodiscard]] RetrievalSet make_retrieval(const std::vector<Identified>& items);

}  // namespace bbs
