#include "bbs/model_io.hpp"

#include "binary_io.hpp"

#include <iterator>
#include <string>

namespace bbs {

namespace {

constexpr std::uint32_t kModelFileVersion = 1;

std::uint32_t method_code(LossMethod m) {
  for (std::size_t i = 0; i < std::size(kAllMethods); ++i) {
    if (kAllMethods[i] == m) return static_cast<std::uint32_t>(i);
  }
  throw ValidationError("unknown loss method");
}

std::uint32_t as_u32(Index v) { return static_cast<std::uint32_t>(v); }

}  // namespace

void save_model(const std::filesystem::path& path, const SavedModel& saved) {
  saved.loss.validate();
  saved.model.validate();
  saved.classifier.validate();
  if (saved.space.total() != static_cast<std::size_t>(saved.classifier.num_classes())) {
    throw ValidationError("label space and classifier disagree on the class count");
  }
  if (saved.classifier.dim() != saved.model.embed_dim()) {
    throw ValidationError("classifier dimension differs from the embedding dimension");
  }

  io::ByteWriter w;
  w.magic("BBSM");
  w.u32(kModelFileVersion);
  w.u32(method_code(saved.loss.method));
  w.f32(static_cast<float>(saved.loss.scale));
  w.f32(static_cast<float>(saved.loss.margin));
  w.u32(saved.loss.use_bias ? 1 : 0);
  w.u32(saved.model.normalize_embedding ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(saved.model.layers.size()));
  for (const auto& l : saved.model.layers) {
    w.u32(as_u32(l.weight.rows()));
    w.u32(as_u32(l.weight.cols()));
    for (Index r = 0; r < l.weight.rows(); ++r) {
      for (Index c = 0; c < l.weight.cols(); ++c) w.f32(static_cast<float>(l.weight(r, c)));
    }
    for (Index r = 0; r < l.bias.size(); ++r) w.f32(static_cast<float>(l.bias(r)));
  }
  w.u32(static_cast<std::uint32_t>(saved.space.num_baskets()));
  for (auto n : saved.space.sizes()) w.u32(static_cast<std::uint32_t>(n));
  const auto& wts = saved.classifier.weights;
  w.u32(as_u32(wts.rows()));
  w.u32(as_u32(wts.cols()));
  for (Index c = 0; c < wts.cols(); ++c) {
    for (Index r = 0; r < wts.rows(); ++r) w.f32(static_cast<float>(wts(r, c)));
  }
  for (Index c = 0; c < wts.cols(); ++c) w.f32(static_cast<float>(saved.classifier.bias(c)));
  w.save(path);
}

SavedModel load_model(const std::filesystem::path& path) {
  io::ByteReader r(path, path.string());
  r.expect_magic("BBSM");
  const auto version = r.u32("version");
  if (version != kModelFileVersion) {
    throw FormatError(FormatError::Kind::BadVersion,
                      "unsupported model file version " + std::to_string(version));
  }
  SavedModel out;
  const auto code = r.u32("loss method");
  if (code >= std::size(kAllMethods)) {
    throw FormatError(FormatError::Kind::Inconsistent, "unknown loss method code " + std::to_string(code));
  }
  out.loss.method = kAllMethods[code];
  out.loss.scale = r.f32("scale");
  out.loss.margin = r.f32("margin");
  out.loss.use_bias = r.u32("use_bias") != 0;
  out.model.normalize_embedding = r.u32("normalize") != 0;

  const auto num_layers = r.u32("layer count");
  r.need(static_cast<std::size_t>(num_layers) * 8, "layer shapes");
  for (std::uint32_t i = 0; i < num_layers; ++i) {
    const auto rows = r.u32("layer rows");
    const auto cols = r.u32("layer cols");
    r.need((static_cast<std::size_t>(rows) * cols + rows) * 4, "layer parameters");
    Layer l{Matrix(rows, cols), Vector(rows)};
    for (Index a = 0; a < rows; ++a) {
      for (Index b = 0; b < cols; ++b) l.weight(a, b) = r.f32("layer weight");
    }
    for (Index a = 0; a < rows; ++a) l.bias(a) = r.f32("layer bias");
    out.model.layers.push_back(std::move(l));
  }

  const auto num_baskets = r.u32("basket count");
  r.need(static_cast<std::size_t>(num_baskets) * 4, "basket sizes");
  std::vector<std::size_t> sizes(num_baskets);
  for (auto& n : sizes) n = r.u32("basket size");

  const auto dim = r.u32("classifier dim");
  const auto classes = r.u32("classifier classes");
  r.need((static_cast<std::size_t>(dim) * classes + classes) * 4, "classifier parameters");
  out.classifier = Classifier(dim, classes);
  for (Index c = 0; c < classes; ++c) {
    for (Index a = 0; a < dim; ++a) out.classifier.weights(a, c) = r.f32("classifier weight");
  }
  for (Index c = 0; c < classes; ++c) out.classifier.bias(c) = r.f32("classifier bias");
  r.expect_end();

  try {
    out.loss.validate();
    out.model.validate();
    out.space = build_label_space(sizes);
  } catch (const ValidationError& e) {
    throw FormatError(FormatError::Kind::Inconsistent, path.string() + ": " + e.what());
  }
  if (out.space.total() != classes) {
    throw FormatError(FormatError::Kind::Inconsistent,
                      path.string() + ": basket sizes do not add up to the classifier width");
  }
  if (static_cast<Index>(dim) != out.model.embed_dim()) {
    throw FormatError(FormatError::Kind::DimensionMismatch,
                      path.string() + ": classifier dimension differs from the embedding");
  }
  return out;
}

}  // namespace bbs
