#include "rad/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "rad/core/error.hpp"

namespace rad::metrics {

double iou(const Box& a, const Box& b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) throw UsageError("iou needs boxes with positive width and height");
  return box_iou(a, b);
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
  return t;
}

namespace {

void check_aligned(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts) {
  if (preds.size() != gts.size())
    throw ShapeError(std::to_string(preds.size()) + " prediction lists vs " + std::to_string(gts.size()) +
                     " ground-truth lists");
}

std::set<std::size_t> truth_classes(std::span<const ImageTruths> gts) {
  std::set<std::size_t> classes;
  for (const auto& image : gts)
    for (const auto& g : image) classes.insert(g.class_id);
  return classes;
}

struct Scored {
  float confidence;
  bool tp;
};

// Greedy matching of one class at one threshold: detections (confidence
// descending, at most 100 per image) take the unmatched ground truth with the
// highest IoU >= threshold.
std::vector<Scored> match_class(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts,
                                std::size_t class_id, double threshold, std::size_t& positives) {
  std::vector<Scored> all;
  positives = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    std::vector<const Prediction*> dets;
    for (const auto& p : preds[i])
      if (p.class_id == class_id && p.confidence > 0.0f) dets.push_back(&p);
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Prediction* a, const Prediction* b) { return a->confidence > b->confidence; });
    if (dets.size() > kMaxDetections) dets.resize(kMaxDetections);

    std::vector<const GroundTruth*> truths;
    for (const auto& g : gts[i])
      if (g.class_id == class_id) truths.push_back(&g);
    positives += truths.size();

    std::vector<bool> used(truths.size(), false);
    for (const Prediction* d : dets) {
      double best = threshold;
      std::ptrdiff_t match = -1;
      for (std::size_t g = 0; g < truths.size(); ++g) {
        if (used[g]) continue;
        const double v = box_iou(d->box, truths[g]->box);
        if (v >= best) {
          best = v;
          match = static_cast<std::ptrdiff_t>(g);
        }
      }
      if (match >= 0) used[static_cast<std::size_t>(match)] = true;
      all.push_back({d->confidence, match >= 0});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.confidence > b.confidence; });
  return all;
}

double mean_or_zero(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double map_at(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts,
              const std::set<std::size_t>& classes, double threshold) {
  std::vector<double> aps;
  for (std::size_t c : classes) aps.push_back(average_precision(preds, gts, c, threshold));
  return mean_or_zero(aps);
}

}  // namespace

double average_precision(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts,
                         std::size_t class_id, double threshold) {
  check_aligned(preds, gts);
  std::size_t positives = 0;
  const auto scored = match_class(preds, gts, class_id, threshold, positives);
  if (positives == 0) return -1.0;

  const std::size_t n = scored.size();
  std::vector<double> recall(n), precision(n);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (scored[i].tp ? tp : fp) += 1;
    recall[i] = tp / static_cast<double>(positives);
    precision[i] = tp / (tp + fp);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

MapResult map_coco(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts,
                   std::span<const double> thresholds) {
  check_aligned(preds, gts);
  const auto classes = truth_classes(gts);
  MapResult r;
  if (classes.empty()) return r;
  std::vector<double> per_threshold;
  for (double t : thresholds) per_threshold.push_back(map_at(preds, gts, classes, t));
  r.map = mean_or_zero(per_threshold);
  r.map50 = map_at(preds, gts, classes, 0.5);
  r.map75 = map_at(preds, gts, classes, 0.75);
  return r;
}

MapResult map_coco(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts) {
  const auto t = coco_thresholds();
  return map_coco(preds, gts, t);
}

double mar(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts,
           std::span<const double> thresholds) {
  check_aligned(preds, gts);
  const auto classes = truth_classes(gts);
  std::vector<double> per_threshold;
  for (double t : thresholds) {
    std::vector<double> recalls;
    for (std::size_t c : classes) {
      std::size_t positives = 0;
      const auto scored = match_class(preds, gts, c, t, positives);
      const auto hits = std::count_if(scored.begin(), scored.end(), [](const Scored& s) { return s.tp; });
      recalls.push_back(static_cast<double>(hits) / static_cast<double>(positives));
    }
    per_threshold.push_back(mean_or_zero(recalls));
  }
  return classes.empty() ? 0.0 : mean_or_zero(per_threshold);
}

double mar(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts) {
  const auto t = coco_thresholds();
  return mar(preds, gts, t);
}

namespace {

std::vector<const Prediction*> top_predictions(const ImagePredictions& preds, std::size_t count) {
  std::vector<const Prediction*> out;
  for (const auto& p : preds) out.push_back(&p);
  std::stable_sort(out.begin(), out.end(),
                   [](const Prediction* a, const Prediction* b) { return a->confidence > b->confidence; });
  if (out.size() > count) out.resize(count);
  return out;
}

}  // namespace

SlotScore box_accuracy(const ImagePredictions& preds, const ImageTruths& gts) {
  std::map<std::size_t, std::size_t> remaining;
  for (const auto& g : gts) ++remaining[g.class_id];
  SlotScore s{0.0, gts.size()};
  for (const Prediction* p : top_predictions(preds, gts.size())) {
    auto it = remaining.find(p->class_id);
    if (it != remaining.end() && it->second > 0) {
      --it->second;
      s.score += 1.0;
    }
  }
  return s;
}

SlotScore mean_iou_metric(const ImagePredictions& preds, const ImageTruths& gts) {
  SlotScore s{0.0, gts.size()};
  for (const Prediction* p : top_predictions(preds, gts.size())) {
    double best = 0.0;
    for (const auto& g : gts)
      if (g.class_id == p->class_id) best = std::max(best, box_iou(p->box, g.box));
    s.score += best;
  }
  return s;
}

namespace {

template <class Fn>
double pooled(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts, Fn fn) {
  check_aligned(preds, gts);
  SlotScore total;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const SlotScore s = fn(preds[i], gts[i]);
    total.score += s.score;
    total.slots += s.slots;
  }
  return total.fraction();
}

}  // namespace

double box_accuracy(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts) {
  return pooled(preds, gts, [](const auto& p, const auto& g) { return box_accuracy(p, g); });
}

double mean_iou_metric(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts) {
  return pooled(preds, gts, [](const auto& p, const auto& g) { return mean_iou_metric(p, g); });
}

double rmse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("rmse: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (a.size() == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return std::sqrt(sum / static_cast<double>(a.size()));
}

EvalRecord evaluate(std::span<const ImagePredictions> preds, std::span<const ImageTruths> gts) {
  const MapResult m = map_coco(preds, gts);
  EvalRecord r;
  r.map = m.map;
  r.map50 = m.map50;
  r.map75 = m.map75;
  r.mar = mar(preds, gts);
  r.accuracy = box_accuracy(preds, gts);
  r.mean_iou = mean_iou_metric(preds, gts);
  return r;
}

}  // namespace rad::metrics
