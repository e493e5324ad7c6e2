#include "bbs/loss.hpp"

#include "bbs/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace bbs {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Geometry {
  double dot;
  double norm_w;
  double norm_x;
  double cos;
};

// Value of a score and its partial derivatives w.r.t. (W.x, cos, |W|, |x|).
struct Score {
  double value = 0.0;
  double d_dot = 0.0;
  double d_cos = 0.0;
  double d_norm_w = 0.0;
  double d_norm_x = 0.0;
};

Geometry geometry(LossMethod method, const Eigen::Ref<const Vector>& w,
                  const Eigen::Ref<const Vector>& x) {
  if (w.size() != x.size()) {
    throw ValidationError("class center has dimension " + std::to_string(w.size()) +
                          " but embedding has " + std::to_string(x.size()));
  }
  const double w2 = w.squaredNorm();
  const double x2 = x.squaredNorm();
  if (method != LossMethod::Softmax) {
    if (w2 == 0.0) throw DomainError("class center W has zero norm; angle is undefined");
    if (x2 == 0.0) throw DomainError("embedding x has zero norm; angle is undefined");
  }
  Geometry geo{};
  geo.dot = w.dot(x);
  geo.norm_w = std::sqrt(w2 + kNormEpsilon);
  geo.norm_x = std::sqrt(x2 + kNormEpsilon);
  geo.cos = geo.dot / (geo.norm_w * geo.norm_x);
  return geo;
}

double chebyshev_t(int m, double c) {
  switch (m) {
    case 1: return c;
    case 2: return 2.0 * c * c - 1.0;
    case 3: return (4.0 * c * c - 3.0) * c;
    case 4: {
      const double c2 = c * c;
      return 8.0 * c2 * c2 - 8.0 * c2 + 1.0;
    }
    default: throw ValidationError("psi margin must be in {1,2,3,4}");
  }
}

// d/dc T_m(c) = m U_{m-1}(c)
double chebyshev_t_prime(int m, double c) {
  switch (m) {
    case 1: return 1.0;
    case 2: return 4.0 * c;
    case 3: return 12.0 * c * c - 3.0;
    case 4: return (32.0 * c * c - 16.0) * c;
    default: throw ValidationError("psi margin must be in {1,2,3,4}");
  }
}

int psi_segment(int m, double c) {
  const double theta = std::acos(std::clamp(c, -1.0, 1.0));
  // Boundary angles k*pi/m belong to the lower segment.
  const int k = static_cast<int>(std::ceil(theta * m / std::numbers::pi)) - 1;
  return std::clamp(k, 0, m - 1);
}

struct PsiValue {
  double value;
  double derivative;
};

PsiValue psi_with_derivative(int m, double c) {
  c = std::clamp(c, -1.0, 1.0);
  const int k = psi_segment(m, c);
  const double sign = (k % 2 == 0) ? 1.0 : -1.0;
  return {sign * chebyshev_t(m, c) - 2.0 * k, sign * chebyshev_t_prime(m, c)};
}

Score score_g(const LossConfig& cfg, const Geometry& geo) {
  Score s;
  switch (cfg.method) {
    case LossMethod::Softmax:
    case LossMethod::LSoftmax:
      s.value = geo.dot;
      s.d_dot = 1.0;
      break;
    case LossMethod::L2Softmax:
      s.value = geo.norm_w * geo.cos;
      s.d_cos = geo.norm_w;
      s.d_norm_w = geo.cos;
      break;
    case LossMethod::SphereFace:
      s.value = geo.norm_x * geo.cos;
      s.d_cos = geo.norm_x;
      s.d_norm_x = geo.cos;
      break;
    case LossMethod::NormFace:
    case LossMethod::CosFace:
    case LossMethod::ArcFace:
      s.value = geo.cos;
      s.d_cos = 1.0;
      break;
  }
  return s;
}

Score score_f(const LossConfig& cfg, const Geometry& geo) {
  Score s;
  switch (cfg.method) {
    case LossMethod::Softmax:
    case LossMethod::L2Softmax:
    case LossMethod::NormFace:
      return score_g(cfg, geo);
    case LossMethod::LSoftmax: {
      const auto p = psi_with_derivative(cfg.integer_margin(), geo.cos);
      const double nn = geo.norm_w * geo.norm_x;
      s.value = nn * p.value;
      s.d_cos = nn * p.derivative;
      s.d_norm_w = geo.norm_x * p.value;
      s.d_norm_x = geo.norm_w * p.value;
      break;
    }
    case LossMethod::SphereFace: {
      const auto p = psi_with_derivative(cfg.integer_margin(), geo.cos);
      s.value = geo.norm_x * p.value;
      s.d_cos = geo.norm_x * p.derivative;
      s.d_norm_x = p.value;
      break;
    }
    case LossMethod::CosFace:
      s.value = geo.cos - cfg.margin;
      s.d_cos = 1.0;
      break;
    case LossMethod::ArcFace: {
      const double c = std::clamp(geo.cos, -1.0, 1.0);
      const double sin_theta = std::sqrt(std::max(0.0, 1.0 - c * c));
      const double cm = std::cos(cfg.margin);
      const double sm = std::sin(cfg.margin);
      s.value = c * cm - sin_theta * sm;
      s.d_cos = sin_theta > 0.0 ? cm + sm * c / sin_theta : cm;
      break;
    }
  }
  return s;
}

// grad_w += coef * d(score)/dW ; grad_x += coef * d(score)/dx
template <typename GW, typename GX>
void add_score_grad(const Score& s, const Geometry& geo, const Eigen::Ref<const Vector>& w,
                    const Eigen::Ref<const Vector>& x, double coef, GW&& grad_w, GX&& grad_x) {
  const double cross = s.d_dot + s.d_cos / (geo.norm_w * geo.norm_x);
  const double self_w = -s.d_cos * geo.cos / (geo.norm_w * geo.norm_w) + s.d_norm_w / geo.norm_w;
  const double self_x = -s.d_cos * geo.cos / (geo.norm_x * geo.norm_x) + s.d_norm_x / geo.norm_x;
  grad_w += (coef * cross) * x + (coef * self_w) * w;
  grad_x += (coef * cross) * w + (coef * self_x) * x;
}

double effective_bias(const LossConfig& cfg, double b) { return cfg.use_bias ? b : 0.0; }

std::vector<std::uint8_t> all_columns(Index n, Index target) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 1);
  mask[static_cast<std::size_t>(target)] = 0;
  return mask;
}

Index target_column(const Classifier& clf, std::size_t target) {
  if (target < 1 || target > static_cast<std::size_t>(clf.num_classes())) {
    throw ValidationError("target class " + std::to_string(target) + " outside 1.." +
                          std::to_string(clf.num_classes()));
  }
  return static_cast<Index>(target - 1);
}

}  // namespace

std::string_view to_string(LossMethod method) {
  switch (method) {
    case LossMethod::Softmax: return "softmax";
    case LossMethod::LSoftmax: return "lsoftmax";
    case LossMethod::L2Softmax: return "l2softmax";
    case LossMethod::NormFace: return "normface";
    case LossMethod::SphereFace: return "sphereface";
    case LossMethod::CosFace: return "cosface";
    case LossMethod::ArcFace: return "arcface";
  }
  return "unknown";
}

LossMethod parse_loss_method(std::string_view name) {
  for (auto m : kAllMethods) {
    if (to_string(m) == name) return m;
  }
  throw ValidationError("unknown loss method '" + std::string(name) + "'");
}

bool uses_scale(LossMethod method) {
  return method == LossMethod::L2Softmax || method == LossMethod::NormFace ||
         method == LossMethod::CosFace || method == LossMethod::ArcFace;
}

bool allows_bias(LossMethod method) {
  return method == LossMethod::Softmax || method == LossMethod::L2Softmax;
}

bool uses_margin(LossMethod method) {
  return method == LossMethod::LSoftmax || method == LossMethod::SphereFace ||
         method == LossMethod::CosFace || method == LossMethod::ArcFace;
}

bool is_cosine(LossMethod method) {
  return method == LossMethod::NormFace || method == LossMethod::CosFace ||
         method == LossMethod::ArcFace;
}

LossConfig LossConfig::make(LossMethod method, double scale, double margin, bool use_bias) {
  LossConfig cfg;
  cfg.method = method;
  cfg.scale = uses_scale(method) ? scale : 1.0;
  cfg.margin = uses_margin(method) ? margin : 0.0;
  cfg.use_bias = use_bias;
  cfg.validate();
  return cfg;
}

void LossConfig::validate() const {
  if (uses_scale(method)) {
    if (!(scale > 0.0) || !std::isfinite(scale)) {
      throw ValidationError("scale s must be positive for " + std::string(to_string(method)));
    }
  } else if (scale != 1.0) {
    throw ValidationError(std::string(to_string(method)) + " does not use a scale; s must be 1");
  }
  if (use_bias && !allows_bias(method)) {
    throw ValidationError(std::string(to_string(method)) + " does not use a bias");
  }
  if (method == LossMethod::LSoftmax || method == LossMethod::SphereFace) {
    if (margin != std::floor(margin) || margin < 1.0 || margin > 4.0) {
      throw ValidationError("margin m must be an integer in {1,2,3,4} for " +
                            std::string(to_string(method)));
    }
  } else if (method == LossMethod::CosFace || method == LossMethod::ArcFace) {
    if (!(margin >= 0.0) || !std::isfinite(margin)) {
      throw ValidationError("margin m must be >= 0 for " + std::string(to_string(method)));
    }
  }
}

void Classifier::validate() const {
  if (bias.size() != weights.cols()) {
    throw ValidationError("classifier bias length does not match the number of classes");
  }
  if (!weights.allFinite() || !bias.allFinite()) {
    throw ValidationError("classifier contains NaN or Inf");
  }
}

double guarded_norm(const Eigen::Ref<const Vector>& v) {
  return std::sqrt(v.squaredNorm() + kNormEpsilon);
}

double psi(int margin, double cos_theta) { return psi_with_derivative(margin, cos_theta).value; }

double similarity_g(const LossConfig& cfg, const Eigen::Ref<const Vector>& w, double b,
                    const Eigen::Ref<const Vector>& x) {
  return score_g(cfg, geometry(cfg.method, w, x)).value + effective_bias(cfg, b);
}

double target_f(const LossConfig& cfg, const Eigen::Ref<const Vector>& w, double b,
                const Eigen::Ref<const Vector>& x) {
  return score_f(cfg, geometry(cfg.method, w, x)).value + effective_bias(cfg, b);
}

BlockForward forward_block(const LossConfig& cfg, const Classifier& clf,
                           const Eigen::Ref<const Vector>& x, std::span<const std::uint8_t> mask,
                           std::optional<Index> target, std::span<double> logits) {
  const Index n = clf.num_classes();
  if (static_cast<Index>(mask.size()) != n || static_cast<Index>(logits.size()) != n) {
    throw ValidationError("mask/logit buffer length does not match classifier block");
  }
  BlockForward out{{kNegInf, 0.0}, std::nullopt};
  for (Index j = 0; j < n; ++j) {
    const bool is_target = target && *target == j;
    if (!is_target && mask[static_cast<std::size_t>(j)] == 0) continue;
    const Geometry geo = geometry(cfg.method, clf.weights.col(j), x);
    const Score s = is_target ? score_f(cfg, geo) : score_g(cfg, geo);
    const double z = cfg.scale * (s.value + effective_bias(cfg, clf.bias[j]));
    logits[static_cast<std::size_t>(j)] = z;
    if (is_target) out.target_logit = z;
    out.partial.max = std::max(out.partial.max, z);
  }
  if (out.partial.max == kNegInf) return out;
  for (Index j = 0; j < n; ++j) {
    const bool is_target = target && *target == j;
    if (!is_target && mask[static_cast<std::size_t>(j)] == 0) continue;
    out.partial.sum += std::exp(logits[static_cast<std::size_t>(j)] - out.partial.max);
  }
  return out;
}

void backward_block(const LossConfig& cfg, const Classifier& clf, const Eigen::Ref<const Vector>& x,
                    std::span<const std::uint8_t> mask, std::optional<Index> target,
                    std::span<const double> logits, double log_normalizer, double weight,
                    ClassifierGrad& grad, Eigen::Ref<Vector> d_x) {
  const Index n = clf.num_classes();
  for (Index j = 0; j < n; ++j) {
    const bool is_target = target && *target == j;
    if (!is_target && mask[static_cast<std::size_t>(j)] == 0) continue;
    const double prob = std::exp(logits[static_cast<std::size_t>(j)] - log_normalizer);
    const double d_logit = weight * (prob - (is_target ? 1.0 : 0.0));
    if (d_logit == 0.0) continue;
    const Geometry geo = geometry(cfg.method, clf.weights.col(j), x);
    const Score s = is_target ? score_f(cfg, geo) : score_g(cfg, geo);
    add_score_grad(s, geo, clf.weights.col(j), x, d_logit * cfg.scale, grad.weights.col(j), d_x);
    if (cfg.use_bias) grad.bias[j] += d_logit * cfg.scale;
  }
}

double combine_partials(std::span<const PartialSum> parts) {
  double global_max = kNegInf;
  for (const auto& p : parts) global_max = std::max(global_max, p.max);
  if (global_max == kNegInf) return kNegInf;
  double total = 0.0;
  for (const auto& p : parts) {
    if (p.max == kNegInf) continue;
    total += p.sum * std::exp(p.max - global_max);
  }
  return global_max + std::log(total);
}

double unified_loss(const LossConfig& cfg, const Classifier& clf,
                    const Eigen::Ref<const Vector>& x, std::size_t target) {
  const Index col = target_column(clf, target);
  const auto mask = all_columns(clf.num_classes(), col);
  std::vector<double> logits(static_cast<std::size_t>(clf.num_classes()));
  const auto fwd = forward_block(cfg, clf, x, mask, col, logits);
  const PartialSum parts[] = {fwd.partial};
  return combine_partials(parts) - *fwd.target_logit;
}

LossGrad unified_loss_grad(const LossConfig& cfg, const Classifier& clf,
                           const Eigen::Ref<const Vector>& x, std::size_t target) {
  const Index col = target_column(clf, target);
  const auto mask = all_columns(clf.num_classes(), col);
  std::vector<double> logits(static_cast<std::size_t>(clf.num_classes()));
  const auto fwd = forward_block(cfg, clf, x, mask, col, logits);
  const PartialSum parts[] = {fwd.partial};
  const double lse = combine_partials(parts);
  ClassifierGrad grad(clf.dim(), clf.num_classes());
  Vector d_x = Vector::Zero(x.size());
  backward_block(cfg, clf, x, mask, col, logits, lse, 1.0, grad, d_x);
  return {std::move(d_x), std::move(grad.weights), std::move(grad.bias)};
}

}  // namespace bbs
