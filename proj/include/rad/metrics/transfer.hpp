#pragma once

// Transfer matrices: rows are datasets (clean, ablation noise, attacked
// sets), columns are victim models, every cell a full EvalRecord.

#include <string>
#include <vector>

#include "json.hpp"
#include "rad/corpus/corpus.hpp"
#include "rad/metrics/metrics.hpp"
#include "rad/toynet/model.hpp"

namespace rad::metrics {

// Detections below this confidence are dropped before evaluation.
inline constexpr float kEvalConfThresh = 0.01f;
inline constexpr float kAblationSigma = 9.0f;

struct NamedModel {
  std::string name;
  toynet::Model model;
};

struct LabeledSet {
  std::string label;
  std::string surrogate;  // empty for clean and ablation rows
  std::vector<corpus::Sample> samples;
  double rmse = 0.0;
};

struct TransferRow {
  std::string label;
  std::string surrogate;
  std::vector<EvalRecord> cells;  // one per model
};

struct TransferMatrix {
  std::vector<std::string> models;
  std::vector<TransferRow> rows;

  // Aligned text table of mAP in percent, one decimal.
  std::string render() const;
  nlohmann::json to_json() const;
  static TransferMatrix from_json(const nlohmann::json& j);
};

// Post-NMS detections of one model over a dataset, converted for scoring.
std::vector<ImagePredictions> predict(const toynet::Model& model, const std::vector<corpus::Sample>& samples,
                                      std::size_t jobs = 1);
std::vector<ImageTruths> truths(const std::vector<corpus::Sample>& samples);

EvalRecord evaluate_model(const toynet::Model& model, const std::vector<corpus::Sample>& samples,
                          std::size_t jobs = 1);

// Clean image plus N(0, sigma^2) noise, clamped and quantized. Deterministic
// in (seed, index).
Tensor ablation_image(const Tensor& clean_hwc, std::uint64_t seed, std::size_t index, float sigma = kAblationSigma);
LabeledSet ablation_set(const std::vector<corpus::Sample>& clean, std::uint64_t seed, float sigma = kAblationSigma);

// Rows "No Attack" and "Ablation" from `clean`, then one row per attacked set.
// Errors: no models (UsageError).
TransferMatrix transfer_matrix(const std::vector<NamedModel>& models, const std::vector<corpus::Sample>& clean,
                               const std::vector<LabeledSet>& attacked, std::uint64_t ablation_seed = 0,
                               std::size_t jobs = 1);

}  // namespace rad::metrics
