#pragma once

// Recorded computation graphs with reverse-mode differentiation.
//
// A GraphBuilder records operations in topological order and checks shapes as
// it goes. finish() freezes the record into an immutable Graph which can then
// be evaluated any number of times against different leaf bindings.

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rad/core/tensor.hpp"

namespace rad {

struct NodeId {
  std::uint32_t index = UINT32_MAX;
  bool valid() const noexcept { return index != UINT32_MAX; }
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind : std::uint8_t {
  kInput,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatMul,
  kConv2d,
  kConv2dTranspose,
  kRelu,
  kSigmoid,
  kSoftplus,
  kSoftmax,
  kLogSoftmax,
  kSum,
  kSumAxis,
  kMean,
  kMax,
  kClamp,
  kStabilize,
  kBroadcast,
  kReshape,
  kConcat,
  kSlice,
};

std::string_view op_name(OpKind kind);

struct OpAttrs {
  int axis = -1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  bool transpose_b = false;
  float lo = 0.0f;
  float hi = 0.0f;
};

struct OpRecord {
  OpKind kind;
  std::vector<NodeId> operands;
  OpAttrs attrs;
  Shape shape;
  std::string name;        // leaves only
  std::int32_t constant = -1;  // index into the constant pool
};

using Bindings = std::map<std::string, Tensor, std::less<>>;

class Graph;

// Values of every node for one set of bindings.
class Evaluation {
 public:
  const Tensor& value(NodeId id) const { return values_.at(id.index); }
  const Tensor& output(std::string_view name) const;
  std::map<std::string, Tensor> outputs() const;
  const Graph& graph() const noexcept { return *graph_; }

 private:
  friend class Graph;
  std::shared_ptr<const Graph> graph_;
  std::vector<Tensor> values_;
};

class Graph : public std::enable_shared_from_this<Graph> {
 public:
  const std::vector<OpRecord>& records() const noexcept { return records_; }
  const OpRecord& record(NodeId id) const { return records_.at(id.index); }
  const Shape& shape(NodeId id) const { return records_.at(id.index).shape; }
  std::size_t size() const noexcept { return records_.size(); }

  NodeId leaf(std::string_view name) const;
  NodeId output_node(std::string_view name) const;
  const std::map<std::string, NodeId, std::less<>>& output_names() const noexcept { return outputs_; }
  const Tensor& constant_value(NodeId id) const;

  // Errors: unbound leaf (UsageError), shape mismatch (ShapeError), non-finite
  // value in any node (NumericError).
  Evaluation evaluate(const Bindings& bindings) const;

  // d(scalar)/d(wrt) for each wrt; scalar must have shape [1] and every wrt
  // must be a leaf. Leaves that do not reach scalar get zeros.
  std::vector<Tensor> gradients(const Evaluation& eval, NodeId scalar, std::span<const NodeId> wrt) const;
  Tensor gradient(const Evaluation& eval, NodeId scalar, NodeId wrt) const;

 private:
  friend class GraphBuilder;
  std::vector<OpRecord> records_;
  std::vector<Tensor> constants_;
  std::map<std::string, NodeId, std::less<>> leaves_;
  std::map<std::string, NodeId, std::less<>> outputs_;
};

class GraphBuilder {
 public:
  GraphBuilder();

  NodeId input(std::string name, Shape shape);
  NodeId constant(Tensor value);
  NodeId scalar(float value) { return constant(Tensor::scalar(value)); }

  // Elementwise binaries broadcast operands to a common shape (numpy rules).
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);

  // [M,K] x [K,N], or [M,K] x [N,K]^T when transpose_b.
  NodeId matmul(NodeId a, NodeId b, bool transpose_b = false);
  // x [Ci,H,W], w [Co,Ci,K,K] -> [Co,Ho,Wo]; zero padding.
  NodeId conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t pad);
  // Adjoint of conv2d with respect to its input: s [Co,Ho,Wo] -> [Ci,out_h,out_w].
  NodeId conv2d_transpose(NodeId s, NodeId w, std::size_t stride, std::size_t pad, std::size_t out_h,
                          std::size_t out_w);

  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId softplus(NodeId x);
  NodeId softmax(NodeId x, int axis = -1);
  NodeId log_softmax(NodeId x, int axis = -1);

  NodeId sum(NodeId x);             // -> [1]
  NodeId sum(NodeId x, int axis);   // drops axis
  NodeId mean(NodeId x);            // -> [1]
  NodeId max(NodeId x);             // -> [1]
  NodeId clamp(NodeId x, float lo, float hi);
  // x + eps where x >= 0, x - eps elsewhere; unit derivative.
  NodeId stabilize(NodeId x, float eps);

  NodeId broadcast(NodeId x, Shape shape);
  NodeId reshape(NodeId x, Shape shape);
  NodeId concat(std::span<const NodeId> parts, int axis);
  NodeId slice(NodeId x, int axis, std::size_t begin, std::size_t end);

  void mark_output(std::string name, NodeId node);
  const Shape& shape(NodeId id) const;

  std::shared_ptr<const Graph> finish() &&;

 private:
  NodeId push(OpRecord record);
  NodeId binary(OpKind kind, NodeId a, NodeId b);
  NodeId unary(OpKind kind, NodeId x);
  std::size_t normalize_axis(NodeId x, int axis) const;
  void check(NodeId id) const;

  std::shared_ptr<Graph> graph_;
};

Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace rad
