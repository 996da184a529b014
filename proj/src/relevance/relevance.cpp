#include "rad/relevance/relevance.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "rad/core/error.hpp"

namespace rad::relevance {

using toynet::HeadLayout;

const char* target_kind_name(TargetKind kind) {
  switch (kind) {
    case TargetKind::kClassification: return "class";
    case TargetKind::kSize: return "size";
    case TargetKind::kLocalization: return "loc";
  }
  return "?";
}

TargetKind parse_target_kind(const std::string& name) {
  if (name == "class" || name == "classification") return TargetKind::kClassification;
  if (name == "size") return TargetKind::kSize;
  if (name == "loc" || name == "localization") return TargetKind::kLocalization;
  throw UsageError("unknown target kind '" + name + "' (expected class, size or loc)");
}

std::vector<TargetNode> nodes_for(const toynet::Detection& box, TargetKind kind) {
  switch (kind) {
    case TargetKind::kClassification: return {{box.box_index, toynet::kFirstClass + box.class_id}};
    case TargetKind::kSize: return {{box.box_index, toynet::kTw}, {box.box_index, toynet::kTh}};
    case TargetKind::kLocalization: return {{box.box_index, toynet::kTx}, {box.box_index, toynet::kTy}};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Initialisation rules

namespace {

void check_normalized(const float* y, std::size_t n, std::size_t block_index) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(y[i] >= 0.0f)) throw UsageError("probability block " + std::to_string(block_index) + " has a negative entry");
    s += y[i];
  }
  if (std::abs(s - 1.0) > 1e-5)
    throw UsageError("probability block " + std::to_string(block_index) + " sums to " + std::to_string(s));
}

}  // namespace

Tensor sglrp_init(const Tensor& y, std::size_t t) {
  if (y.rank() != 1) throw ShapeError("sglrp_init expects a vector, got " + to_string(y.shape()));
  if (t >= y.size()) throw UsageError("target index " + std::to_string(t) + " out of range");
  check_normalized(y.data(), y.size(), 0);
  Tensor r(y.shape());
  const float yt = y[t];
  for (std::size_t n = 0; n < y.size(); ++n) r[n] = n == t ? yt * (1.0f - yt) : -(y[n] * yt);
  return r;
}

Tensor multinode_init(const Tensor& y, std::size_t block, std::span<const std::size_t> targets) {
  if (y.rank() != 1) throw ShapeError("multinode_init expects a vector, got " + to_string(y.shape()));
  if (block == 0 || y.size() % block != 0)
    throw ShapeError("length " + std::to_string(y.size()) + " is not a multiple of block " + std::to_string(block));
  if (targets.empty()) throw EmptyTargetError("multinode_init needs at least one target");
  for (std::size_t b = 0; b < y.size() / block; ++b) check_normalized(y.data() + b * block, block, b);

  std::vector<bool> is_target(y.size(), false);
  float sum_targets = 0.0f;
  for (std::size_t t : targets) {
    if (t >= y.size()) throw UsageError("target index " + std::to_string(t) + " out of range");
    if (is_target[t]) throw UsageError("target index " + std::to_string(t) + " repeated");
    is_target[t] = true;
    sum_targets += y[t];
  }
  const float m = static_cast<float>(targets.size());
  Tensor r(y.shape());
  for (std::size_t n = 0; n < y.size(); ++n) r[n] = is_target[n] ? y[n] * (1.0f - y[n]) : -(y[n] * sum_targets) / m;
  return r;
}

// ---------------------------------------------------------------------------
// Propagation rules as graph ops

NodeId zplus_dense(GraphBuilder& b, NodeId a, NodeId w_plus, NodeId r_out) {
  const NodeId z = b.matmul(a, w_plus, true);
  const NodeId s = b.div(r_out, b.stabilize(z, kStabilizer));
  return b.mul(a, b.matmul(s, w_plus));
}

NodeId zb_dense(GraphBuilder& b, NodeId x, NodeId w, NodeId w_plus, NodeId w_minus, NodeId lo, NodeId hi,
                NodeId r_out) {
  const NodeId z = b.sub(b.sub(b.matmul(x, w, true), b.matmul(lo, w_plus, true)), b.matmul(hi, w_minus, true));
  const NodeId s = b.div(r_out, b.stabilize(z, kStabilizer));
  return b.sub(b.sub(b.mul(x, b.matmul(s, w)), b.mul(lo, b.matmul(s, w_plus))), b.mul(hi, b.matmul(s, w_minus)));
}

NodeId zplus_conv(GraphBuilder& b, NodeId a, NodeId w_plus, NodeId r_out, std::size_t stride, std::size_t pad) {
  const Shape in = b.shape(a);
  const NodeId z = b.conv2d(a, w_plus, stride, pad);
  const NodeId s = b.div(r_out, b.stabilize(z, kStabilizer));
  return b.mul(a, b.conv2d_transpose(s, w_plus, stride, pad, in[1], in[2]));
}

NodeId zb_conv(GraphBuilder& b, NodeId x, NodeId w, NodeId w_plus, NodeId w_minus, NodeId lo, NodeId hi,
               NodeId r_out, std::size_t stride, std::size_t pad) {
  const Shape in = b.shape(x);
  const NodeId z = b.sub(b.sub(b.conv2d(x, w, stride, pad), b.conv2d(lo, w_plus, stride, pad)),
                         b.conv2d(hi, w_minus, stride, pad));
  const NodeId s = b.div(r_out, b.stabilize(z, kStabilizer));
  auto back = [&](NodeId weights) { return b.conv2d_transpose(s, weights, stride, pad, in[1], in[2]); };
  return b.sub(b.sub(b.mul(x, back(w)), b.mul(lo, back(w_plus))), b.mul(hi, back(w_minus)));
}

// ---------------------------------------------------------------------------
// Numeric wrappers

namespace {

Tensor positive(const Tensor& w) { return WeightMatrix(w).positive_part(); }
Tensor negative(const Tensor& w) { return WeightMatrix(w).negative_part(); }

void check_nonnegative(const Tensor& a) {
  for (float v : a.values())
    if (v < 0.0f) throw UsageError("z+ rule needs non-negative activations, got " + std::to_string(v));
}

void check_bounds(const Tensor& lo, const Tensor& hi) {
  if (lo.shape() != hi.shape()) throw ShapeError("bounds shapes differ");
  for (std::size_t i = 0; i < lo.size(); ++i)
    if (lo[i] > hi[i]) throw UsageError("lower bound exceeds upper bound at " + std::to_string(i));
}

Tensor run(GraphBuilder&& b, NodeId out, Bindings bindings) {
  b.mark_output("r", out);
  auto g = std::move(b).finish();
  return g->evaluate(bindings).output("r");
}

}  // namespace

Tensor propagate_zplus(const Tensor& a, const Tensor& w, const Tensor& r_out) {
  if (a.rank() != 1 || w.rank() != 2 || r_out.rank() != 1 || w.dim(0) != a.size() || w.dim(1) != r_out.size())
    throw ShapeError("propagate_zplus: a " + to_string(a.shape()) + ", w " + to_string(w.shape()) + ", r " +
                     to_string(r_out.shape()));
  check_nonnegative(a);
  const std::size_t n = a.size(), k = r_out.size();
  GraphBuilder b;
  // Weights are stored transposed ([k, n]) so both products are plain matmuls.
  Tensor wt({k, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) wt[j * n + i] = w[i * k + j];
  const NodeId out = zplus_dense(b, b.constant(a.reshaped({1, n})), b.constant(positive(wt)),
                                 b.constant(r_out.reshaped({1, k})));
  return run(std::move(b), out, {}).reshaped({n});
}

Tensor propagate_zb(const Tensor& x, const Tensor& w, const Tensor& lo, const Tensor& hi, const Tensor& r_out) {
  if (x.rank() != 1 || w.rank() != 2 || r_out.rank() != 1 || w.dim(0) != x.size() || w.dim(1) != r_out.size() ||
      lo.shape() != x.shape())
    throw ShapeError("propagate_zb: x " + to_string(x.shape()) + ", w " + to_string(w.shape()) + ", r " +
                     to_string(r_out.shape()));
  check_bounds(lo, hi);
  const std::size_t n = x.size(), k = r_out.size();
  Tensor wt({k, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) wt[j * n + i] = w[i * k + j];
  GraphBuilder b;
  const NodeId out = zb_dense(b, b.constant(x.reshaped({1, n})), b.constant(wt), b.constant(positive(wt)),
                              b.constant(negative(wt)), b.constant(lo.reshaped({1, n})),
                              b.constant(hi.reshaped({1, n})), b.constant(r_out.reshaped({1, k})));
  return run(std::move(b), out, {}).reshaped({n});
}

Tensor propagate_zplus_conv(const Tensor& a, const Tensor& w, const Tensor& r_out, std::size_t stride,
                            std::size_t pad) {
  check_nonnegative(a);
  GraphBuilder b;
  const NodeId out = zplus_conv(b, b.constant(a), b.constant(positive(w)), b.constant(r_out), stride, pad);
  return run(std::move(b), out, {});
}

Tensor propagate_zb_conv(const Tensor& x, const Tensor& w, const Tensor& lo, const Tensor& hi, const Tensor& r_out,
                         std::size_t stride, std::size_t pad) {
  if (lo.shape() != x.shape()) throw ShapeError("bounds must match the input shape");
  check_bounds(lo, hi);
  GraphBuilder b;
  const NodeId out = zb_conv(b, b.constant(x), b.constant(w), b.constant(positive(w)), b.constant(negative(w)),
                             b.constant(lo), b.constant(hi), b.constant(r_out), stride, pad);
  return run(std::move(b), out, {});
}

// ---------------------------------------------------------------------------
// Relevance map graph

RelevanceGraph::RelevanceGraph(const toynet::Model& model, TargetKind kind) : model_(&model), kind_(kind) {
  const HeadLayout& h = model.head();
  const std::size_t a = h.anchors, g = h.grid, c = h.classes, v = h.values_per_anchor();
  GraphBuilder b;
  const toynet::ForwardNodes fwd = toynet::build_forward(b, model, toynet::WeightBinding::kConstant);
  image_ = fwd.image;
  nodes_.head = fwd.head;

  if (kind == TargetKind::kClassification) {
    const NodeId head4 = b.reshape(fwd.head, {a, v, g, g});
    const NodeId p = b.softmax(b.slice(head4, 1, toynet::kFirstClass, toynet::kFirstClass + c), 1);
    const NodeId target = b.input("target_mask", {a, c, g, g});
    const NodeId candidate = b.input("candidate_mask", {a, 1, g, g});
    const NodeId inv_m = b.input("inv_m", {1});
    const NodeId sum_targets = b.sum(b.mul(target, p));
    const NodeId on_target = b.mul(target, b.sub(p, b.mul(p, p)));
    const NodeId off_target =
        b.mul(b.mul(b.sub(candidate, target), p), b.mul(sum_targets, inv_m));
    const NodeId r_class = b.sub(on_target, off_target);
    const std::array<NodeId, 2> parts{b.constant(Tensor({a, toynet::kFirstClass, g, g})), r_class};
    nodes_.head_relevance = b.reshape(b.concat(parts, 1), {a * v, g, g});
  } else {
    const NodeId target = b.input("target_mask", {a * v, g, g});
    nodes_.head_relevance = b.mul(target, fwd.head);
  }

  NodeId r = nodes_.head_relevance;
  const auto& layers = model.layers();
  for (std::size_t l = layers.size(); l-- > 1;) {
    const auto& layer = layers[l];
    r = zplus_conv(b, fwd.layer_inputs[l], b.constant(layer.weight.positive_part()), r, layer.stride, layer.pad);
  }
  const auto& first = layers.front();
  const Shape in = b.shape(fwd.scaled);
  r = zb_conv(b, fwd.scaled, b.constant(first.weight.values()), b.constant(first.weight.positive_part()),
              b.constant(first.weight.negative_part()), b.constant(Tensor(in, 0.0f)), b.constant(Tensor(in, 1.0f)),
              r, first.stride, first.pad);
  nodes_.input_relevance = r;
  nodes_.map = b.sum(r, 0);

  signed_sum_ = b.sum(nodes_.map);
  positive_sum_ = b.sum(b.relu(nodes_.map));
  squared_sum_ = b.sum(b.mul(nodes_.map, nodes_.map));
  b.mark_output("map", nodes_.map);
  graph_ = std::move(b).finish();
}

Bindings RelevanceGraph::bind(const Tensor& image_hwc, const TargetSet& targets,
                              std::span<const toynet::Detection> pool) const {
  const HeadLayout& h = model_->head();
  if (targets.nodes.empty()) throw EmptyTargetError("target set is empty");
  if (targets.kind != kind_)
    throw UsageError(std::string("target kind ") + target_kind_name(targets.kind) + " does not match graph kind " +
                     target_kind_name(kind_));
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& n : targets.nodes) {
    if (n.box_index >= h.box_count()) throw UsageError("stale target: box " + std::to_string(n.box_index));
    const bool ok = kind_ == TargetKind::kClassification ? (n.field >= toynet::kFirstClass && n.field < h.values_per_anchor())
                    : kind_ == TargetKind::kSize          ? (n.field == toynet::kTw || n.field == toynet::kTh)
                                                          : (n.field == toynet::kTx || n.field == toynet::kTy);
    if (!ok) throw UsageError("node field " + std::to_string(n.field) + " does not fit the target kind");
    if (!seen.insert({n.box_index, n.field}).second) throw UsageError("target node repeated");
  }

  Bindings bindings;
  bindings.emplace("image", toynet::to_chw(image_hwc));
  const std::size_t cells = h.grid * h.grid;
  if (kind_ == TargetKind::kClassification) {
    if (pool.size() != h.box_count())
      throw UsageError("class targets need the full pre-NMS pool of " + std::to_string(h.box_count()) + " boxes");
    Tensor target({h.anchors, h.classes, h.grid, h.grid});
    Tensor candidate({h.anchors, 1, h.grid, h.grid});
    auto anchor_cell = [&](std::size_t box) { return std::pair{box % h.anchors, box / h.anchors}; };
    for (const auto& d : pool)
      if (d.confidence >= kCandidateFloor) {
        const auto [an, cell] = anchor_cell(d.box_index);
        candidate[an * cells + cell] = 1.0f;
      }
    for (const auto& n : targets.nodes) {
      const auto [an, cell] = anchor_cell(n.box_index);
      target[(an * h.classes + (n.field - toynet::kFirstClass)) * cells + cell] = 1.0f;
      candidate[an * cells + cell] = 1.0f;
    }
    bindings.emplace("target_mask", std::move(target));
    bindings.emplace("candidate_mask", std::move(candidate));
    bindings.emplace("inv_m", Tensor::scalar(1.0f / static_cast<float>(targets.size())));
  } else {
    Tensor target({h.channels(), h.grid, h.grid});
    for (const auto& n : targets.nodes) target[toynet::head_offset(h, n.box_index, n.field)] = 1.0f;
    bindings.emplace("target_mask", std::move(target));
  }
  return bindings;
}

Tensor relevance_map(const toynet::Model& model, const Tensor& image_hwc, const TargetSet& targets) {
  const RelevanceGraph rg(model, targets.kind);
  const auto pool = toynet::decode_all(model.head(), toynet::forward(model, image_hwc));
  return rg.graph().evaluate(rg.bind(image_hwc, targets, pool)).value(rg.nodes().map);
}

Tensor to_gray(const Tensor& map) {
  Tensor out(map.shape());
  if (map.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
  const float range = *hi - *lo;
  if (!(range > 0.0f)) return out;
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = std::round((map[i] - *lo) / range * 255.0f);
  return out;
}

}  // namespace rad::relevance
