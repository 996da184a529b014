#pragma once

// Small single-shot anchor-grid detectors.
//
// The head emits, per grid cell and anchor, (tx, ty, tw, th, objectness
// logit, C class logits). In the graph the head is channel-first,
// [A*(5+C), G, G]; node indices exposed to callers use the cell-major layout
// G x G x A x (5+C).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rad/core/graph.hpp"
#include "rad/core/weights.hpp"

namespace rad::toynet {

enum class Arch : char { kA = 'A', kB = 'B' };

Arch parse_arch(const std::string& id);
char arch_char(Arch arch);

struct ConvLayer {
  WeightMatrix weight;  // [Co, Ci, K, K]
  Tensor bias;          // [Co]
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool relu = true;

  std::size_t out_channels() const { return weight.shape()[0]; }
  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t kernel() const { return weight.shape()[2]; }
};

struct HeadLayout {
  std::size_t input_side = 128;
  std::size_t grid = 8;
  std::size_t anchors = 2;
  std::size_t classes = 4;
  std::array<float, 2> anchor_sizes{24.0f, 56.0f};

  std::size_t cell_stride() const { return input_side / grid; }
  std::size_t values_per_anchor() const { return 5 + classes; }
  std::size_t box_count() const { return grid * grid * anchors; }
  std::size_t channels() const { return anchors * values_per_anchor(); }
  std::size_t node_count() const { return box_count() * values_per_anchor(); }
};

// Offsets inside one anchor's block of head values.
enum HeadField : std::size_t { kTx = 0, kTy = 1, kTw = 2, kTh = 3, kObjectness = 4, kFirstClass = 5 };

class Model {
 public:
  Model(Arch arch, HeadLayout head, std::vector<ConvLayer> layers);

  Arch arch() const noexcept { return arch_; }
  const HeadLayout& head() const noexcept { return head_; }
  const std::vector<ConvLayer>& layers() const noexcept { return layers_; }
  std::vector<ConvLayer>& layers() noexcept { return layers_; }

  // Bit-level equality of every weight and bias.
  bool identical(const Model& other) const;

 private:
  Arch arch_;
  HeadLayout head_;
  std::vector<ConvLayer> layers_;
};

// Deterministic He-initialised detector. Errors: classes == 0.
Model build_detector(Arch arch, std::size_t classes, std::uint64_t seed);

// Graph nodes of one forward pass.
struct ForwardNodes {
  NodeId image;                      // leaf, [3,S,S] in pixel units 0..255
  NodeId scaled;                     // image / 255
  std::vector<NodeId> layer_inputs;  // a^(l): input of conv layer l
  std::vector<NodeId> pre_activations;
  NodeId head;                       // [A*(5+C), G, G]
};

enum class WeightBinding {
  kConstant,  // weights baked into the graph
  kLeaves,    // weights are leaves "w<l>" / "b<l>" bound per evaluation
};

ForwardNodes build_forward(GraphBuilder& builder, const Model& model, WeightBinding binding);

// Binds "w<l>" / "b<l>" leaves for WeightBinding::kLeaves graphs.
void bind_weights(const Model& model, Bindings& bindings);
std::string weight_leaf(std::size_t layer);
std::string bias_leaf(std::size_t layer);

// Image layout conversions: HWC <-> CHW.
Tensor to_chw(const Tensor& hwc);
Tensor to_hwc(const Tensor& chw);

// Head tensor for one image in the cell-major G x G x A x (5+C) layout.
Tensor forward(const Model& model, const Tensor& image_hwc);
// Converts the graph's channel-first head to the cell-major layout.
Tensor head_to_cell_major(const HeadLayout& head, const Tensor& channel_first);

// Flat index in the G x G x A x (5+C) layout.
std::size_t node_index(const HeadLayout& head, std::size_t box_index, std::size_t field);
// Index into the channel-first head tensor for a (box, field) pair.
std::size_t head_offset(const HeadLayout& head, std::size_t box_index, std::size_t field);

}  // namespace rad::toynet
