#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace bbs {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class LossMethod { Softmax, LSoftmax, L2Softmax, NormFace, SphereFace, CosFace, ArcFace };

inline constexpr LossMethod kAllMethods[] = {
    LossMethod::Softmax,    LossMethod::LSoftmax, LossMethod::L2Softmax, LossMethod::NormFace,
    LossMethod::SphereFace, LossMethod::CosFace,  LossMethod::ArcFace};

[[nodiscard]] std::string_view to_string(LossMethod method);
/// Accepts lower-case names: softmax, lsoftmax, l2softmax, normface, sphereface, cosface, arcface.
[[nodiscard]] LossMethod parse_loss_method(std::string_view name);

/// Whether the method multiplies logits by a scale s.
[[nodiscard]] bool uses_scale(LossMethod method);
/// Whether the method may carry a per-class bias.
[[nodiscard]] bool allows_bias(LossMethod method);
/// Whether the method applies a margin in the target term.
[[nodiscard]] bool uses_margin(LossMethod method);
/// Whether g depends only on the angle between W and x.
[[nodiscard]] bool is_cosine(LossMethod method);

struct LossConfig {
  LossMethod method = LossMethod::Softmax;
  double scale = 1.0;
  double margin = 0.0;
  bool use_bias = false;

  /// Builds a config, forcing s = 1 for methods without a scale.
  static LossConfig make(LossMethod method, double scale = 1.0, double margin = 0.0,
                         bool use_bias = false);

  /// Throws ValidationError when the fields break the per-method rules.
  void validate() const;

  /// Integer margin for the psi-based methods.
  [[nodiscard]] int integer_margin() const { return static_cast<int>(margin); }
};

/// One column per class center; `bias` is ignored unless LossConfig::use_bias.
struct Classifier {
  Matrix weights;
  Vector bias;

  Classifier() = default;
  Classifier(Index dim, Index num_classes)
      : weights(Matrix::Zero(dim, num_classes)), bias(Vector::Zero(num_classes)) {}

  [[nodiscard]] Index dim() const { return weights.rows(); }
  [[nodiscard]] Index num_classes() const { return weights.cols(); }
  void validate() const;
};

struct ClassifierGrad {
  Matrix weights;
  Vector bias;

  ClassifierGrad() = default;
  ClassifierGrad(Index dim, Index num_classes)
      : weights(Matrix::Zero(dim, num_classes)), bias(Vector::Zero(num_classes)) {}
  void set_zero() {
    weights.setZero();
    bias.setZero();
  }
};

struct LossGrad {
  Vector d_x;
  Matrix d_weights;
  Vector d_bias;
};

/// Norm used everywhere a vector is normalized: sqrt(|v|^2 + 1e-12).
inline constexpr double kNormEpsilon = 1e-12;
[[nodiscard]] double guarded_norm(const Eigen::Ref<const Vector>& v);

/// Table-1 style similarity g(W, x) + b (b only counts when cfg.use_bias).
[[nodiscard]] double similarity_g(const LossConfig& cfg, const Eigen::Ref<const Vector>& w,
                                  double b, const Eigen::Ref<const Vector>& x);
/// Target score f(W, x) + b.
[[nodiscard]] double target_f(const LossConfig& cfg, const Eigen::Ref<const Vector>& w, double b,
                              const Eigen::Ref<const Vector>& x);

/// Piecewise psi used by L-Softmax and SphereFace, as a function of cos(theta).
[[nodiscard]] double psi(int margin, double cos_theta);

/// Softmax-family loss over all columns; `target` is a 1-based class id.
[[nodiscard]] double unified_loss(const LossConfig& cfg, const Classifier& clf,
                                  const Eigen::Ref<const Vector>& x, std::size_t target);
[[nodiscard]] LossGrad unified_loss_grad(const LossConfig& cfg, const Classifier& clf,
                                         const Eigen::Ref<const Vector>& x, std::size_t target);

// Masked-softmax kernel. Columns whose mask byte is 1 (plus the target column, if present)
// enter the denominator; the target uses f, every other column uses g. Both the serial
// basket loss and the sharded workers run this kernel over their own column block.

/// Running (max, sum exp(z - max)) over a block of logits; `max` is -inf for an empty block.
struct PartialSum {
  double max;
  double sum;
};

struct BlockForward {
  PartialSum partial;
  std::optional<double> target_logit;
};

/// Fills `logits` for the included columns (others left untouched) and returns the block sums.
/// `target` is a 0-based column in `clf`.
BlockForward forward_block(const LossConfig& cfg, const Classifier& clf,
                           const Eigen::Ref<const Vector>& x, std::span<const std::uint8_t> mask,
                           std::optional<Index> target, std::span<double> logits);

/// Adds `weight * dL/dparam` for this block into `grad` (same shape as clf) and `d_x`.
void backward_block(const LossConfig& cfg, const Classifier& clf, const Eigen::Ref<const Vector>& x,
                    std::span<const std::uint8_t> mask, std::optional<Index> target,
                    std::span<const double> logits, double log_normalizer, double weight,
                    ClassifierGrad& grad, Eigen::Ref<Vector> d_x);

/// Combines block partials in the given order into log(sum exp(z)).
[[nodiscard]] double combine_partials(std::span<const PartialSum> parts);

}  // namespace bbs
