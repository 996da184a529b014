#pragma once

// Detection quality and attack strength measurements.

#include <cstddef>
#include <span>
#include <vector>

#include "rad/core/box.hpp"
#include "rad/core/tensor.hpp"

namespace rad::metrics {

struct Prediction {
  Box box;
  std::size_t class_id = 0;
  float confidence = 0.0f;
};

struct GroundTruth {
  Box box;
  std::size_t class_id = 0;
};

using ImagePredictions = std::vector<Prediction>;
using ImageTruths = std::vector<GroundTruth>;

inline constexpr std::size_t kMaxDetections = 100;

// Intersection over union. Errors: non-positive width or height.
double iou(const Box& a, const Box& b);

// 0.50, 0.55, ..., 0.95.
std::vector<double> coco_thresholds();

struct MapResult {
  double map = 0.0;
  double map50 = 0.0;
  double map75 = 0.0;
};

// COCO-style mAP: per class 101-point interpolated AP, averaged over classes
// with at least one ground truth, then over thresholds. mAP50 / mAP75 use the
// single thresholds 0.5 / 0.75 regardless of `thresholds`. Returns 0 when no
// class has ground truth. Predictions with confidence <= 0 are not detections
// and are ignored, here and in mar().
MapResult map_coco(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts,
                   std::span<const double> thresholds);
MapResult map_coco(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts);

// AP of one class at one threshold, or a negative value when the class has
// no ground truth.
double average_precision(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts,
                         std::size_t class_id, double threshold);

// Mean over classes and thresholds of recall at up to 100 detections per image.
double mar(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts,
           std::span<const double> thresholds);
double mar(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts);

// Per-image slot counts; aggregate by summing and dividing.
struct SlotScore {
  double score = 0.0;      // hits, or summed IoU
  std::size_t slots = 0;   // |gts|
  double fraction() const { return slots == 0 ? 0.0 : score / static_cast<double>(slots); }
};

// Class multiset overlap between the |gts| most confident predictions and the
// ground truths.
SlotScore box_accuracy(const ImagePredictions& preds, const ImageTruths& gts);
// Each of the |gts| most confident predictions scores its IoU with the best
// same-class ground truth, 0 when no ground truth has its class.
SlotScore mean_iou_metric(const ImagePredictions& preds, const ImageTruths& gts);

double box_accuracy(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts);
double mean_iou_metric(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts);

// sqrt(sum (a - b)^2 / N). Errors: shape mismatch.
double rmse(const Tensor& a, const Tensor& b);

struct EvalRecord {
  double map = 0.0, map50 = 0.0, map75 = 0.0;
  double accuracy = 0.0, mean_iou = 0.0, mar = 0.0;
  double rmse = 0.0;
};

// All aggregates for one model on one dataset. preds are post-NMS.
EvalRecord evaluate(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts);

}  // namespace rad::metrics
