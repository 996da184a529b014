#include "rad/toynet/model.hpp"

#include <cmath>
#include <random>

#include "rad/core/error.hpp"

namespace rad::toynet {

Arch parse_arch(const std::string& id) {
  if (id == "A" || id == "a") return Arch::kA;
  if (id == "B" || id == "b") return Arch::kB;
  throw UsageError("unknown arch id '" + id + "' (expected A or B)");
}

char arch_char(Arch arch) { return static_cast<char>(arch); }

Model::Model(Arch arch, HeadLayout head, std::vector<ConvLayer> layers)
    : arch_(arch), head_(head), layers_(std::move(layers)) {
  if (layers_.empty()) throw UsageError("model needs at least one layer");
  if (layers_.back().out_channels() != head_.channels())
    throw ShapeError("head layer emits " + std::to_string(layers_.back().out_channels()) + " channels, layout needs " +
                     std::to_string(head_.channels()));
}

bool Model::identical(const Model& other) const {
  if (arch_ != other.arch_ || layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& a = layers_[i];
    const auto& b = other.layers_[i];
    if (!a.weight.values().identical(b.weight.values()) || !a.bias.identical(b.bias) || a.stride != b.stride ||
        a.pad != b.pad || a.relu != b.relu)
      return false;
  }
  return true;
}

namespace {

struct LayerSpec {
  std::size_t out, kernel, stride;
};

std::vector<LayerSpec> backbone(Arch arch) {
  switch (arch) {
    case Arch::kA: return {{8, 3, 2}, {16, 3, 2}, {32, 3, 2}, {32, 3, 2}, {32, 3, 1}};
    case Arch::kB: return {{12, 3, 2}, {12, 3, 1}, {24, 3, 2}, {24, 3, 2}, {48, 3, 2}, {48, 1, 1}, {48, 3, 1}};
  }
  throw UsageError("unknown arch");
}

}  // namespace

Model build_detector(Arch arch, std::size_t classes, std::uint64_t seed) {
  if (classes == 0) throw UsageError("detector needs at least one class");
  HeadLayout head;
  head.classes = classes;
  std::mt19937_64 rng(seed);

  std::vector<ConvLayer> layers;
  std::size_t in = 3;
  auto make = [&](std::size_t out, std::size_t k, std::size_t stride, bool relu) {
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(in * k * k)));
    Tensor w({out, in, k, k});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = dist(rng);
    ConvLayer layer{WeightMatrix(std::move(w)), Tensor({out}), stride, k / 2, relu};
    layers.push_back(std::move(layer));
    in = out;
  };
  for (const auto& s : backbone(arch)) make(s.out, s.kernel, s.stride, true);
  make(head.channels(), 1, 1, false);

  // Small head weights and a negative objectness prior keep untrained boxes quiet.
  ConvLayer& h = layers.back();
  for (std::size_t i = 0; i < h.weight.values().size(); ++i) h.weight.values()[i] *= 0.1f;
  for (std::size_t a = 0; a < head.anchors; ++a) h.bias[a * head.values_per_anchor() + kObjectness] = -4.0f;
  return Model(arch, head, std::move(layers));
}

std::string weight_leaf(std::size_t layer) { return "w" + std::to_string(layer); }
std::string bias_leaf(std::size_t layer) { return "b" + std::to_string(layer); }

ForwardNodes build_forward(GraphBuilder& b, const Model& model, WeightBinding binding) {
  const auto& head = model.head();
  ForwardNodes nodes;
  nodes.image = b.input("image", {3, head.input_side, head.input_side});
  nodes.scaled = b.mul(nodes.image, b.scalar(1.0f / 255.0f));
  NodeId x = nodes.scaled;
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    const ConvLayer& layer = model.layers()[l];
    const Shape bias_shape{layer.out_channels(), 1, 1};
    NodeId w, bias;
    if (binding == WeightBinding::kConstant) {
      w = b.constant(layer.weight.values());
      bias = b.constant(layer.bias.reshaped(bias_shape));
    } else {
      w = b.input(weight_leaf(l), layer.weight.shape());
      bias = b.reshape(b.input(bias_leaf(l), {layer.out_channels()}), bias_shape);
    }
    nodes.layer_inputs.push_back(x);
    const NodeId z = b.add(b.conv2d(x, w, layer.stride, layer.pad), bias);
    nodes.pre_activations.push_back(z);
    x = layer.relu ? b.relu(z) : z;
  }
  const Shape expected{head.channels(), head.grid, head.grid};
  if (b.shape(x) != expected)
    throw ShapeError("head shape " + to_string(b.shape(x)) + " differs from layout " + to_string(expected));
  nodes.head = x;
  b.mark_output("head", x);
  return nodes;
}

void bind_weights(const Model& model, Bindings& bindings) {
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    bindings.insert_or_assign(weight_leaf(l), model.layers()[l].weight.values());
    bindings.insert_or_assign(bias_leaf(l), model.layers()[l].bias);
  }
}

Tensor to_chw(const Tensor& hwc) {
  if (hwc.rank() != 3) throw ShapeError("expected an H x W x C image, got " + to_string(hwc.shape()));
  const std::size_t h = hwc.dim(0), w = hwc.dim(1), c = hwc.dim(2);
  Tensor out({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) out[(k * h + y) * w + x] = hwc[(y * w + x) * c + k];
  return out;
}

Tensor to_hwc(const Tensor& chw) {
  if (chw.rank() != 3) throw ShapeError("expected a C x H x W tensor, got " + to_string(chw.shape()));
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor out({h, w, c});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(y * w + x) * c + k] = chw[(k * h + y) * w + x];
  return out;
}

Tensor forward(const Model& model, const Tensor& image_hwc) {
  GraphBuilder b;
  build_forward(b, model, WeightBinding::kConstant);
  auto graph = std::move(b).finish();
  const std::size_t s = model.head().input_side;
  if (image_hwc.shape() != Shape{s, s, 3})
    throw ShapeError("image must be " + to_string({s, s, 3}) + ", got " + to_string(image_hwc.shape()));
  return head_to_cell_major(model.head(), graph->evaluate({{"image", to_chw(image_hwc)}}).output("head"));
}

Tensor head_to_cell_major(const HeadLayout& head, const Tensor& channel_first) {
  if (channel_first.size() != head.node_count())
    throw ShapeError("head tensor has " + std::to_string(channel_first.size()) + " values, layout needs " +
                     std::to_string(head.node_count()));
  Tensor out({head.grid, head.grid, head.anchors, head.values_per_anchor()});
  for (std::size_t box = 0; box < head.box_count(); ++box)
    for (std::size_t f = 0; f < head.values_per_anchor(); ++f)
      out[node_index(head, box, f)] = channel_first[head_offset(head, box, f)];
  return out;
}

std::size_t node_index(const HeadLayout& head, std::size_t box_index, std::size_t field) {
  return box_index * head.values_per_anchor() + field;
}

std::size_t head_offset(const HeadLayout& head, std::size_t box_index, std::size_t field) {
  const std::size_t anchor = box_index % head.anchors;
  const std::size_t cell = box_index / head.anchors;
  const std::size_t channel = anchor * head.values_per_anchor() + field;
  return channel * head.grid * head.grid + cell;
}

}  // namespace rad::toynet
