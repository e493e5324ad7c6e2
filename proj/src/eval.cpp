#include "bbs/eval.hpp"

#include "bbs/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

namespace bbs {

namespace {

std::vector<std::size_t> ranked_gallery(const RetrievalSet& rs, const Vector& query) {
  std::vector<double> scores(rs.gallery.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = pair_score(query, rs.gallery[i].embedding);
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

void check_retrieval(const RetrievalSet& rs) {
  if (rs.queries.empty()) throw ValidationError("retrieval set has no queries");
  if (rs.gallery.empty()) throw ValidationError("retrieval set has an empty gallery");
}

}  // namespace

double pair_score(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b,
                  ScoreKind kind) {
  if (a.size() != b.size()) throw ValidationError("embeddings have different dimensions");
  if (kind == ScoreKind::NegEuclidean) return -(a - b).norm();
  return a.dot(b) / (guarded_norm(a) * guarded_norm(b));
}

std::vector<ScoredPair> score_pairs(const PairSet& pairs, ScoreKind kind) {
  std::vector<ScoredPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({pair_score(p.a, p.b, kind), p.genuine});
  return out;
}

TarResult tar_at_far(std::span<const ScoredPair> scored, double far) {
  if (!(far > 0.0 && far <= 1.0)) throw ValidationError("FAR must be in (0, 1]");
  std::vector<double> genuine;
  std::vector<double> impostor;
  for (const auto& p : scored) (p.genuine ? genuine : impostor).push_back(p.score);
  if (genuine.empty() || impostor.empty()) {
    throw ValidationError("TAR@FAR needs at least one genuine and one impostor pair");
  }
  std::sort(impostor.begin(), impostor.end(), std::greater<>());
  const auto n_imp = static_cast<double>(impostor.size());

  // Largest number of accepted impostors whose fraction stays within far.
  auto allowed = static_cast<std::size_t>(std::floor(far * n_imp));
  while (allowed < impostor.size() && static_cast<double>(allowed + 1) / n_imp <= far) ++allowed;
  while (allowed > 0 && static_cast<double>(allowed) / n_imp > far) --allowed;

  TarResult out;
  out.resolvable = far * n_imp >= 1.0;
  if (allowed >= impostor.size()) {
    out.threshold = std::min(*std::min_element(genuine.begin(), genuine.end()), impostor.back());
  } else {
    out.threshold = std::nextafter(impostor[allowed], std::numeric_limits<double>::infinity());
  }
  const auto accepted = std::count_if(genuine.begin(), genuine.end(),
                                      [&](double s) { return s >= out.threshold; });
  out.tar = static_cast<double>(accepted) / static_cast<double>(genuine.size());
  return out;
}

TarResult tar_at_far(const PairSet& pairs, double far, ScoreKind kind) {
  const auto scored = score_pairs(pairs, kind);
  return tar_at_far(scored, far);
}

double verification_accuracy(std::span<const ScoredPair> scored) {
  if (scored.empty()) throw ValidationError("verification accuracy needs at least one pair");
  std::vector<ScoredPair> sorted(scored.begin(), scored.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const ScoredPair& a, const ScoredPair& b) { return a.score < b.score; });
  const std::size_t n = sorted.size();
  std::size_t genuine_total = 0;
  for (const auto& p : sorted) genuine_total += p.genuine ? 1 : 0;

  // Threshold between positions i-1 and i: everything from i upward is accepted.
  std::size_t impostors_below = 0;
  std::size_t genuine_below = 0;
  std::size_t best = genuine_total;  // i = 0, accept everything
  for (std::size_t i = 1; i <= n; ++i) {
    (sorted[i - 1].genuine ? genuine_below : impostors_below) += 1;
    if (i < n && sorted[i - 1].score == sorted[i].score) continue;
    best = std::max(best, impostors_below + (genuine_total - genuine_below));
  }
  return static_cast<double>(best) / static_cast<double>(n);
}

double verification_accuracy(const PairSet& pairs, ScoreKind kind) {
  const auto scored = score_pairs(pairs, kind);
  return verification_accuracy(scored);
}

double cmc_topk(const RetrievalSet& rs, std::size_t k) {
  if (k < 1) throw ValidationError("CMC rank must be at least 1");
  check_retrieval(rs);
  std::size_t hits = 0;
  for (const auto& q : rs.queries) {
    const auto order = ranked_gallery(rs, q.embedding);
    const std::size_t depth = std::min(k, order.size());
    for (std::size_t r = 0; r < depth; ++r) {
      if (rs.gallery[order[r]].identity == q.identity) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(rs.queries.size());
}

double mean_ap(const RetrievalSet& rs) {
  check_retrieval(rs);
  double total = 0.0;
  for (const auto& q : rs.queries) {
    const auto order = ranked_gallery(rs, q.embedding);
    std::size_t found = 0;
    double precision_sum = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (rs.gallery[order[r]].identity != q.identity) continue;
      ++found;
      precision_sum += static_cast<double>(found) / static_cast<double>(r + 1);
    }
    if (found == 0) {
      throw ValidationError("query identity " + std::to_string(q.identity) +
                            " has no match in the gallery");
    }
    total += precision_sum / static_cast<double>(found);
  }
  return total / static_cast<double>(rs.queries.size());
}

std::vector<Identified> embed_all(const ModelParams& model, const LabeledSet& data) {
  std::vector<Identified> out;
  out.reserve(data.samples.size());
  ForwardCache cache;
  for (const auto& s : data.samples) {
    const Vector f = Eigen::Map<const Eigen::VectorXf>(s.feature.data(),
                                                       static_cast<Index>(s.feature.size()))
                         .cast<double>();
    out.push_back({forward_embed(model, f, cache), s.global_class});
  }
  return out;
}

PairSet make_pairs(const std::vector<Identified>& items, std::size_t per_kind, std::uint64_t seed) {
  std::map<std::uint32_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < items.size(); ++i) groups[items[i].identity].push_back(i);
  if (groups.size() < 2) throw ValidationError("pairs need at least two identities");

  std::vector<std::pair<std::size_t, std::size_t>> same;
  for (const auto& [id, members] : groups) {
    for (std::size_t a = 0; a < members.size(); ++a) {
      for (std::size_t b = a + 1; b < members.size(); ++b) same.emplace_back(members[a], members[b]);
    }
  }
  if (same.empty()) throw ValidationError("pairs need an identity with at least two samples");

  std::mt19937_64 rng(seed);
  std::shuffle(same.begin(), same.end(), rng);
  if (same.size() > per_kind) same.resize(per_kind);

  PairSet out;
  out.reserve(same.size() + per_kind);
  for (const auto& [a, b] : same) out.push_back({items[a].embedding, items[b].embedding, true});
  std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
  std::size_t made = 0;
  while (made < per_kind) {
    const std::size_t a = pick(rng);
    const std::size_t b = pick(rng);
    if (items[a].identity == items[b].identity) continue;
    out.push_back({items[a].embedding, items[b].embedding, false});
    ++made;
  }
  return out;
}

RetrievalSet make_retrieval(const std::vector<Identified>& items) {
  std::map<std::uint32_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < items.size(); ++i) groups[items[i].identity].push_back(i);
  RetrievalSet rs;
  for (const auto& [id, members] : groups) {
    if (members.size() < 2) {
      rs.gallery.push_back(items[members.front()]);
      continue;
    }
    rs.queries.push_back(items[members.front()]);
    for (std::size_t j = 1; j < members.size(); ++j) rs.gallery.push_back(items[members[j]]);
  }
  return rs;
}

}  // namespace bbs
