#include "bbs/dataset.hpp"

#include "binary_io.hpp"
#include "bbs/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace bbs {

namespace {

constexpr std::uint32_t kBasketFileVersion = 1;

std::unordered_set<std::uint32_t> identities(const Basket& b) {
  return {b.local_to_global.begin(), b.local_to_global.end()};
}

}  // namespace

void BasketSet::validate() const {
  for (std::size_t m = 0; m < baskets.size(); ++m) {
    const auto& b = baskets[m];
    const std::string where = "basket " + std::to_string(m + 1);
    std::unordered_set<std::uint32_t> seen;
    for (auto g : b.local_to_global) {
      if (!seen.insert(g).second) {
        throw ValidationError(where + ": identity " + std::to_string(g) +
                              " appears under two local labels");
      }
    }
    std::vector<bool> used(b.num_classes(), false);
    for (const auto& s : b.samples) {
      if (s.feature.size() != dim) throw ValidationError(where + ": feature dimension mismatch");
      if (s.local_label < 1 || s.local_label > b.num_classes()) {
        throw ValidationError(where + ": local label " + std::to_string(s.local_label) +
                              " outside 1.." + std::to_string(b.num_classes()));
      }
      if (b.local_to_global[s.local_label - 1] != s.global_class) {
        throw ValidationError(where + ": local label " + std::to_string(s.local_label) +
                              " maps to two identities");
      }
      for (float v : s.feature) {
        if (!std::isfinite(v)) throw ValidationError(where + ": non-finite feature value");
      }
      used[s.local_label - 1] = true;
    }
    if (std::find(used.begin(), used.end(), false) != used.end()) {
      throw ValidationError(where + ": local labels are not contiguous (a label has no samples)");
    }
  }
}

std::size_t BasketSet::num_samples() const {
  std::size_t n = 0;
  for (const auto& b : baskets) n += b.samples.size();
  return n;
}

LabelSpace BasketSet::label_space() const {
  std::vector<std::size_t> sizes;
  for (const auto& b : baskets) sizes.push_back(b.num_classes());
  return build_label_space(sizes);
}

void SplitSpec::validate() const {
  if (probs.empty()) throw ValidationError("split needs at least one part");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ValidationError("split probabilities must be >= 0");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ValidationError("split probabilities sum to " + std::to_string(total) + ", not 1");
  }
}

BasketSet split_dataset(const LabeledSet& data, const SplitSpec& spec) {
  spec.validate();
  if (data.samples.empty()) throw ValidationError("cannot split an empty dataset");
  const std::size_t k = spec.parts();

  std::map<std::uint32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    by_class[data.samples[i].global_class].push_back(i);
  }

  std::mt19937_64 rng(spec.seed);
  std::discrete_distribution<std::size_t> multiplicity(spec.probs.begin(), spec.probs.end());

  BasketSet out;
  out.dim = data.dim;
  out.baskets.resize(k);
  std::vector<std::size_t> basket_order(k);

  for (auto& [identity, members] : by_class) {
    const std::size_t drawn = multiplicity(rng) + 1;
    const std::size_t parts = std::min(drawn, members.size());
    std::shuffle(members.begin(), members.end(), rng);

    // Fisher-Yates prefix: the first `parts` entries are the chosen baskets.
    std::iota(basket_order.begin(), basket_order.end(), std::size_t{0});
    for (std::size_t i = 0; i < parts; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, k - 1);
      std::swap(basket_order[i], basket_order[pick(rng)]);
    }

    for (std::size_t part = 0; part < parts; ++part) {
      auto& basket = out.baskets[basket_order[part]];
      basket.local_to_global.push_back(identity);
      const auto local = static_cast<std::uint32_t>(basket.local_to_global.size());
      for (std::size_t j = part; j < members.size(); j += parts) {
        const auto& src = data.samples[members[j]];
        basket.samples.push_back({src.feature, identity, local});
      }
    }
  }
  return out;
}

std::vector<double> overlap_probs(double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValidationError("overlap ratio must be in [0, 1]");
  return {1.0 - ratio, ratio};
}

std::vector<double> geometric_probs(std::size_t parts) {
  if (parts < 2) throw ValidationError("geometric split needs at least 2 parts");
  const double norm = 2.0 / (std::pow(3.0, static_cast<double>(parts)) - 1.0);
  std::vector<double> probs(parts);
  for (std::size_t i = 1; i <= parts; ++i) {
    probs[i - 1] = norm * std::pow(3.0, static_cast<double>(parts - i));
  }
  return probs;
}

double overlap_ratio(const Basket& a, const Basket& b) {
  if (a.num_classes() == 0 || b.num_classes() == 0) {
    throw ValidationError("overlap ratio needs nonempty baskets");
  }
  const auto ids_a = identities(a);
  std::size_t both = 0;
  for (auto g : b.local_to_global) both += ids_a.count(g);
  const std::size_t either = ids_a.size() + b.num_classes() - both;
  return static_cast<double>(both) / static_cast<double>(either);
}

double containment_ratio(const Basket& a, const Basket& b) {
  if (a.num_classes() == 0) throw ValidationError("containment needs a nonempty basket");
  const auto ids_b = identities(b);
  std::size_t both = 0;
  for (auto g : a.local_to_global) both += ids_b.count(g);
  return static_cast<double>(both) / static_cast<double>(a.num_classes());
}

double mean_pairwise_overlap(const BasketSet& set) {
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < set.baskets.size(); ++i) {
    for (std::size_t j = i + 1; j < set.baskets.size(); ++j) {
      total += overlap_ratio(set.baskets[i], set.baskets[j]);
      ++pairs;
    }
  }
  if (pairs == 0) throw ValidationError("pairwise overlap needs at least two baskets");
  return total / static_cast<double>(pairs);
}

LabeledSet gen_synthetic(std::size_t num_classes, std::size_t samples_per_class, std::size_t dim,
                         double spread, std::uint64_t seed) {
  if (num_classes == 0 || samples_per_class == 0 || dim == 0) {
    throw ValidationError("synthetic generation needs positive class, sample and dimension counts");
  }
  if (!(spread >= 0.0) || !std::isfinite(spread)) {
    throw ValidationError("cluster spread must be non-negative");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const auto unit = [](Vector v) {
    const double n = v.norm();
    return n > 0.0 ? Vector(v / n) : v;
  };

  std::vector<Vector> centers;
  centers.reserve(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    Vector v(static_cast<Index>(dim));
    do {
      for (auto& e : v) e = normal(rng);
    } while (v.norm() == 0.0);
    centers.push_back(unit(v));
  }

  LabeledSet out;
  out.dim = static_cast<std::uint32_t>(dim);
  out.samples.reserve(num_classes * samples_per_class);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < samples_per_class; ++i) {
      Vector v = centers[c];
      for (auto& e : v) e += spread * normal(rng);
      v = unit(v);
      LabeledSample s;
      s.global_class = static_cast<std::uint32_t>(c + 1);
      s.feature.assign(v.begin(), v.end());
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

BasketSet as_single_basket(const LabeledSet& data) {
  std::set<std::uint32_t> ids;
  for (const auto& s : data.samples) ids.insert(s.global_class);
  BasketSet out;
  out.dim = data.dim;
  auto& basket = out.baskets.emplace_back();
  basket.local_to_global.assign(ids.begin(), ids.end());
  std::unordered_map<std::uint32_t, std::uint32_t> local;
  for (std::uint32_t i = 0; i < basket.local_to_global.size(); ++i) {
    local[basket.local_to_global[i]] = i + 1;
  }
  for (const auto& s : data.samples) {
    basket.samples.push_back({s.feature, s.global_class, local[s.global_class]});
  }
  return out;
}

LabeledSet flatten(const BasketSet& set) {
  LabeledSet out{set.dim, {}};
  for (const auto& b : set.baskets) {
    for (const auto& s : b.samples) out.samples.push_back({s.feature, s.global_class});
  }
  return out;
}

void save_baskets(const std::filesystem::path& path, const BasketSet& set) {
  if (set.baskets.empty()) throw ValidationError("refusing to save an empty basket list");
  if (set.dim == 0) throw ValidationError("feature dimension must be positive");
  set.validate();
  io::ByteWriter w;
  w.magic("BBS1");
  w.u32(kBasketFileVersion);
  w.u32(static_cast<std::uint32_t>(set.baskets.size()));
  w.u32(set.dim);
  for (const auto& b : set.baskets) {
    w.u32(static_cast<std::uint32_t>(b.num_classes()));
    w.u32(static_cast<std::uint32_t>(b.samples.size()));
    for (const auto& s : b.samples) {
      w.u32(s.local_label);
      w.u32(s.global_class);
      for (float v : s.feature) w.f32(v);
    }
  }
  w.save(path);
}

BasketSet load_baskets(const std::filesystem::path& path,
                       std::optional<std::uint32_t> expected_dim) {
  io::ByteReader r(path, path.string());
  r.expect_magic("BBS1");
  const auto version = r.u32("version");
  if (version != kBasketFileVersion) {
    throw FormatError(FormatError::Kind::BadVersion,
                      "unsupported basket file version " + std::to_string(version));
  }
  BasketSet set;
  const auto num_baskets = r.u32("basket count");
  set.dim = r.u32("feature dimension");
  if (set.dim == 0) {
    throw FormatError(FormatError::Kind::DimensionMismatch, "basket file has zero feature dimension");
  }
  if (expected_dim && *expected_dim != set.dim) {
    throw FormatError(FormatError::Kind::DimensionMismatch,
                      "basket file has feature dimension " + std::to_string(set.dim) +
                          ", expected " + std::to_string(*expected_dim));
  }
  const std::size_t sample_bytes = 8 + 4 * static_cast<std::size_t>(set.dim);
  r.need(static_cast<std::size_t>(num_baskets) * 8, "basket headers");
  set.baskets.resize(num_baskets);
  for (auto& b : set.baskets) {
    const auto num_classes = r.u32("basket class count");
    const auto count = r.u32("basket sample count");
    r.need(static_cast<std::size_t>(count) * sample_bytes, "samples");
    b.local_to_global.assign(num_classes, 0);
    std::vector<bool> assigned(num_classes, false);
    b.samples.resize(count);
    for (auto& s : b.samples) {
      s.local_label = r.u32("local label");
      s.global_class = r.u32("global class");
      s.feature.resize(set.dim);
      for (auto& v : s.feature) v = r.f32("feature");
      if (s.local_label < 1 || s.local_label > num_classes) {
        throw FormatError(FormatError::Kind::Inconsistent,
                          "local label " + std::to_string(s.local_label) + " outside 1.." +
                              std::to_string(num_classes));
      }
      if (!assigned[s.local_label - 1]) {
        assigned[s.local_label - 1] = true;
        b.local_to_global[s.local_label - 1] = s.global_class;
      }
    }
  }
  r.expect_end();
  try {
    set.validate();
  } catch (const ValidationError& e) {
    throw FormatError(FormatError::Kind::Inconsistent, e.what());
  }
  return set;
}

}  // namespace bbs
