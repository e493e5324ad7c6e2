#pragma once

#include "bbs/basket.hpp"
#include "bbs/loss.hpp"
#include "bbs/model.hpp"

#include <filesystem>

namespace bbs {

/// Everything needed to embed new samples or resume scoring with a trained head.
struct SavedModel {
  LossConfig loss;
  ModelParams model;
  LabelSpace space;
  Classifier classifier;
};

/// Binary model file ("BBSM", little-endian, f32 parameters).
void save_model(const std::filesystem::path& path, const SavedModel& saved);
[[nodiscard]] SavedModel load_model(const std::filesystem::path& path);

}  // namespace bbs
