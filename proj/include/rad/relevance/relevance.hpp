#pragma once

// Layer-wise relevance propagation over the toy detectors.
//
// Relevance starts at the head (SGLRP-style class init, or raw box values for
// the size and localisation kinds), passes through hidden layers with the z+
// rule and through the input layer with the zB rule. Every step is a graph op,
// so the resulting map h(x, T) can be differentiated with respect to x.

#include <memory>
#include <span>
#include <vector>

#include "rad/core/graph.hpp"
#include "rad/toynet/detect.hpp"
#include "rad/toynet/model.hpp"

namespace rad::relevance {

inline constexpr float kStabilizer = 1e-9f;
inline constexpr float kCandidateFloor = 0.05f;

enum class TargetKind { kClassification, kSize, kLocalization };

const char* target_kind_name(TargetKind kind);
TargetKind parse_target_kind(const std::string& name);  // class | size | loc

struct TargetNode {
  std::size_t box_index = 0;
  std::size_t field = 0;  // toynet::HeadField offset
  friend bool operator==(const TargetNode&, const TargetNode&) = default;
};

struct TargetSet {
  TargetKind kind = TargetKind::kClassification;
  std::vector<TargetNode> nodes;
  std::size_t size() const { return nodes.size(); }
};

// Target nodes of one box for a kind: argmax class node, (tw, th) or (tx, ty).
std::vector<TargetNode> nodes_for(const toynet::Detection& box, TargetKind kind);

// ---------------------------------------------------------------------------
// Numeric rules on plain tensors.

// R_t = y_t (1 - y_t), R_n = -y_n y_t. Errors: y not normalised, t invalid.
Tensor sglrp_init(const Tensor& y, std::size_t t);

// Multi-node init over concatenated per-box probability blocks of width
// `block`. R_n = y_n (1 - y_n) on targets, -(1/m) y_n sum_i y_ti elsewhere.
// Errors: empty targets, repeated target, block not normalised.
Tensor multinode_init(const Tensor& y_blocks, std::size_t block, std::span<const std::size_t> targets);

// Dense z+ rule. a [n] >= 0, w [n, k], r_out [k] -> r_in [n].
Tensor propagate_zplus(const Tensor& a, const Tensor& w, const Tensor& r_out);
// Convolutional z+ rule. a [Ci,H,W] >= 0, w [Co,Ci,K,K], r_out [Co,Ho,Wo].
Tensor propagate_zplus_conv(const Tensor& a, const Tensor& w, const Tensor& r_out, std::size_t stride,
                            std::size_t pad);

// Dense zB rule for the input layer, per-input bounds lo[n] <= hi[n].
Tensor propagate_zb(const Tensor& x, const Tensor& w, const Tensor& lo, const Tensor& hi, const Tensor& r_out);
Tensor propagate_zb_conv(const Tensor& x, const Tensor& w, const Tensor& lo, const Tensor& hi, const Tensor& r_out,
                         std::size_t stride, std::size_t pad);

// ---------------------------------------------------------------------------
// Graph builders for the same rules (a, r_out are graph nodes; weights are
// the already-split parts).

NodeId zplus_dense(GraphBuilder& b, NodeId a, NodeId w_plus, NodeId r_out);  // a [1,n], w [k,n], r [1,k]
NodeId zb_dense(GraphBuilder& b, NodeId x, NodeId w, NodeId w_plus, NodeId w_minus, NodeId lo, NodeId hi,
                NodeId r_out);
NodeId zplus_conv(GraphBuilder& b, NodeId a, NodeId w_plus, NodeId r_out, std::size_t stride, std::size_t pad);
NodeId zb_conv(GraphBuilder& b, NodeId x, NodeId w, NodeId w_plus, NodeId w_minus, NodeId lo, NodeId hi,
               NodeId r_out, std::size_t stride, std::size_t pad);

// ---------------------------------------------------------------------------
// Relevance map graph for one model and target kind.

struct MapNodes {
  NodeId head;            // [A*(5+C), G, G]
  NodeId head_relevance;  // initial relevance at the head
  NodeId input_relevance; // [3, S, S]
  NodeId map;             // h(x, T): [S, S], summed over colour channels
};

class RelevanceGraph {
 public:
  RelevanceGraph(const toynet::Model& model, TargetKind kind);

  TargetKind kind() const noexcept { return kind_; }
  const toynet::Model& model() const noexcept { return *model_; }
  const Graph& graph() const noexcept { return *graph_; }
  std::shared_ptr<const Graph> graph_ptr() const noexcept { return graph_; }
  const MapNodes& nodes() const noexcept { return nodes_; }
  NodeId image() const noexcept { return image_; }

  // Binds image (H x W x 3, 0..255) and target leaves. `pool` is the
  // pre-NMS decode of the same image; its boxes with confidence >= 0.05 form
  // the complement set of the class init. Errors: empty T (EmptyTargetError),
  // kind mismatch, invalid or repeated nodes.
  Bindings bind(const Tensor& image_hwc, const TargetSet& targets, std::span<const toynet::Detection> pool) const;

  // Scalar reductions of the map: sum(h), sum(relu(h)), sum(h^2).
  NodeId signed_sum() const noexcept { return signed_sum_; }
  NodeId positive_sum() const noexcept { return positive_sum_; }
  NodeId squared_sum() const noexcept { return squared_sum_; }

 private:
  const toynet::Model* model_;
  TargetKind kind_;
  std::shared_ptr<const Graph> graph_;
  MapNodes nodes_;
  NodeId image_, signed_sum_, positive_sum_, squared_sum_;
};

// Convenience: h(x, T) as an S x S tensor.
Tensor relevance_map(const toynet::Model& model, const Tensor& image_hwc, const TargetSet& targets);

// Min-max normalised 8-bit map (constant maps become 0).
Tensor to_gray(const Tensor& map);

}  // namespace rad::relevance
