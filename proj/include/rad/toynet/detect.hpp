#pragma once

#include <cstddef>
#include <vector>

#include "rad/core/box.hpp"
#include "rad/toynet/model.hpp"

namespace rad::toynet {

inline constexpr float kDefaultConfThresh = 0.25f;
inline constexpr float kDefaultNmsIou = 0.5f;

struct Detection {
  Box box;
  std::size_t class_id = 0;
  std::vector<float> class_probs;
  float objectness = 0.0f;
  float confidence = 0.0f;
  std::size_t box_index = 0;            // (cell * anchors + anchor)
  std::vector<std::size_t> node_refs;   // cell-major head indices, 5 + C of them
  float score = 0.0f;                   // logit(confidence), used by dynamic selection
};

// Decodes every anchor of a cell-major head tensor, in box-index order.
std::vector<Detection> decode_all(const HeadLayout& head, const Tensor& cell_major);

// Inverse of the box decoding for one assignment; returns (tx, ty, tw, th).
std::array<float, 4> encode_box(const HeadLayout& head, std::size_t box_index, const Box& box);
Box decode_box(const HeadLayout& head, std::size_t box_index, float tx, float ty, float tw, float th);

// Confidence descending, ties by ascending box index.
void sort_by_confidence(std::vector<Detection>& detections);

// Greedy per-class suppression. Output is sorted by confidence.
std::vector<Detection> nms(std::vector<Detection> detections, float iou_thresh);

// Candidates with confidence >= conf_thresh after NMS. Errors: image shape.
std::vector<Detection> detect(const Model& model, const Tensor& image_hwc, float conf_thresh = kDefaultConfThresh,
                              float nms_iou = kDefaultNmsIou);
// Same, from a head tensor already computed.
std::vector<Detection> detect_from_head(const HeadLayout& head, const Tensor& cell_major, float conf_thresh,
                                        float nms_iou);

}  // namespace rad::toynet
