#include "rad/toynet/detect.hpp"

#include <algorithm>
#include <cmath>

#include "rad/core/error.hpp"

namespace rad::toynet {

namespace {

constexpr float kMaxLogScale = 4.0f;

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

Box decode_box(const HeadLayout& head, std::size_t box_index, float tx, float ty, float tw, float th) {
  const std::size_t cell = box_index / head.anchors;
  const float anchor = head.anchor_sizes[box_index % head.anchors];
  const float stride = static_cast<float>(head.cell_stride());
  const float cx = (static_cast<float>(cell % head.grid) + tx) * stride;
  const float cy = (static_cast<float>(cell / head.grid) + ty) * stride;
  const float w = anchor * std::exp(std::clamp(tw, -kMaxLogScale, kMaxLogScale));
  const float h = anchor * std::exp(std::clamp(th, -kMaxLogScale, kMaxLogScale));
  return {cx - 0.5f * w, cy - 0.5f * h, w, h};
}

std::array<float, 4> encode_box(const HeadLayout& head, std::size_t box_index, const Box& box) {
  const std::size_t cell = box_index / head.anchors;
  const float anchor = head.anchor_sizes[box_index % head.anchors];
  const float stride = static_cast<float>(head.cell_stride());
  return {box.center_x() / stride - static_cast<float>(cell % head.grid),
          box.center_y() / stride - static_cast<float>(cell / head.grid), std::log(box.w / anchor),
          std::log(box.h / anchor)};
}

std::vector<Detection> decode_all(const HeadLayout& head, const Tensor& cell_major) {
  if (cell_major.size() != head.node_count())
    throw ShapeError("head tensor has " + std::to_string(cell_major.size()) + " values, layout needs " +
                     std::to_string(head.node_count()));
  std::vector<Detection> out;
  out.reserve(head.box_count());
  for (std::size_t b = 0; b < head.box_count(); ++b) {
    const float* v = cell_major.data() + node_index(head, b, 0);
    Detection d;
    d.box_index = b;
    d.box = decode_box(head, b, v[kTx], v[kTy], v[kTw], v[kTh]);
    d.objectness = sigmoid(v[kObjectness]);

    const float* logits = v + kFirstClass;
    const float top = *std::max_element(logits, logits + head.classes);
    double z = 0.0;
    for (std::size_t c = 0; c < head.classes; ++c) z += std::exp(static_cast<double>(logits[c] - top));
    d.class_probs.resize(head.classes);
    for (std::size_t c = 0; c < head.classes; ++c)
      d.class_probs[c] = static_cast<float>(std::exp(static_cast<double>(logits[c] - top)) / z);
    d.class_id = static_cast<std::size_t>(std::max_element(d.class_probs.begin(), d.class_probs.end()) -
                                          d.class_probs.begin());
    d.confidence = std::clamp(d.objectness * d.class_probs[d.class_id], 0.0f, 1.0f);

    // log(c / (1 - c)) computed from logits to stay finite near saturation.
    const double log_obj = -std::log1p(std::exp(-static_cast<double>(v[kObjectness])));
    const double log_cls = -std::log(z);
    const double log_c = log_obj + log_cls;
    d.score = static_cast<float>(log_c - std::log(-std::expm1(std::min(log_c, -1e-12))));

    d.node_refs.resize(head.values_per_anchor());
    for (std::size_t f = 0; f < head.values_per_anchor(); ++f) d.node_refs[f] = node_index(head, b, f);
    out.push_back(std::move(d));
  }
  return out;
}

void sort_by_confidence(std::vector<Detection>& detections) {
  std::sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.box_index < b.box_index;
  });
}

std::vector<Detection> nms(std::vector<Detection> detections, float iou_thresh) {
  sort_by_confidence(detections);
  std::vector<Detection> kept;
  for (auto& d : detections) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && box_iou(k.box, d.box) >= iou_thresh;
    });
    if (!suppressed) kept.push_back(std::move(d));
  }
  return kept;
}

std::vector<Detection> detect_from_head(const HeadLayout& head, const Tensor& cell_major, float conf_thresh,
                                        float nms_iou) {
  auto all = decode_all(head, cell_major);
  std::erase_if(all, [&](const Detection& d) { return d.confidence < conf_thresh; });
  return nms(std::move(all), nms_iou);
}

std::vector<Detection> detect(const Model& model, const Tensor& image_hwc, float conf_thresh, float nms_iou) {
  return detect_from_head(model.head(), forward(model, image_hwc), conf_thresh, nms_iou);
}

}  // namespace rad::toynet
