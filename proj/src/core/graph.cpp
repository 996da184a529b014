#include "rad/core/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "conv.hpp"
#include "rad/core/error.hpp"
#include "rad/kernels/kernels.hpp"

namespace rad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kConv2dTranspose: return "conv2d_transpose";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kSum: return "sum";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kMean: return "mean";
    case OpKind::kMax: return "max";
    case OpKind::kClamp: return "clamp";
    case OpKind::kStabilize: return "stabilize";
    case OpKind::kBroadcast: return "broadcast";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
  }
  return "?";
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

// Strides of `in` aligned to `out`, zero along broadcast axes.
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t src = in.size() - 1 - i;
    const std::size_t dst = out.size() - 1 - i;
    strides[dst] = in[src] == 1 ? 0 : stride;
    stride *= in[src];
  }
  return strides;
}

template <typename Fn>
void for_each_broadcast(const Shape& in, const Shape& out, Fn&& fn) {
  const auto strides = aligned_strides(in, out);
  const std::size_t n = numel(out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    fn(flat, src);
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      src += strides[d];
      if (idx[d] < out[d]) break;
      src -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
}

Tensor broadcast_to(const Tensor& in, const Shape& out) {
  Tensor result(out);
  if (in.size() == 1) {
    std::fill(result.data(), result.data() + result.size(), in[0]);
    return result;
  }
  for_each_broadcast(in.shape(), out, [&](std::size_t dst, std::size_t src) { result[dst] = in[src]; });
  return result;
}

Tensor reduce_to(const Tensor& grad, const Shape& in) {
  if (grad.shape() == in) return grad;
  std::vector<double> acc(numel(in), 0.0);
  for_each_broadcast(in, grad.shape(), [&](std::size_t dst, std::size_t src) { acc[src] += grad[dst]; });
  Tensor out(in);
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

detail::ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  detail::ConvGeometry g{};
  g.in_c = x[0];
  g.in_h = x[1];
  g.in_w = x[2];
  g.out_c = w[0];
  g.kernel = w[2];
  g.stride = stride;
  g.pad = pad;
  g.out_h = detail::conv_out_extent(g.in_h, g.kernel, stride, pad);
  g.out_w = detail::conv_out_extent(g.in_w, g.kernel, stride, pad);
  return g;
}

float stable_sigmoid(float x) {
  if (x >= 0) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

void softmax_forward(const Tensor& x, std::size_t axis, bool log_space, Tensor& out) {
  const auto s = split_axis(x.shape(), axis);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t i = 0; i < s.len; ++i) mx = std::max(mx, x[base + i * s.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) total += std::exp(static_cast<double>(x[base + i * s.inner] - mx));
      const double log_total = std::log(total);
      for (std::size_t i = 0; i < s.len; ++i) {
        const double shifted = static_cast<double>(x[base + i * s.inner] - mx);
        out[base + i * s.inner] =
            static_cast<float>(log_space ? shifted - log_total : std::exp(shifted) / total);
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Builder

GraphBuilder::GraphBuilder() : graph_(std::make_shared<Graph>()) {}

void GraphBuilder::check(NodeId id) const {
  if (!id.valid() || id.index >= graph_->records_.size())
    throw UsageError("graph node reference out of range");
}

const Shape& GraphBuilder::shape(NodeId id) const {
  check(id);
  return graph_->records_[id.index].shape;
}

NodeId GraphBuilder::push(OpRecord record) {
  for (auto op : record.operands) check(op);
  for (auto d : record.shape)
    if (d == 0) throw ShapeError(std::string(op_name(record.kind)) + " produces an empty dimension");
  graph_->records_.push_back(std::move(record));
  return NodeId{static_cast<std::uint32_t>(graph_->records_.size() - 1)};
}

NodeId GraphBuilder::input(std::string name, Shape shape) {
  if (graph_->leaves_.count(name)) throw UsageError("duplicate leaf name: " + name);
  OpRecord r{OpKind::kInput, {}, {}, std::move(shape), name};
  const NodeId id = push(std::move(r));
  graph_->leaves_.emplace(std::move(name), id);
  return id;
}

NodeId GraphBuilder::constant(Tensor value) {
  OpRecord r{OpKind::kConstant, {}, {}, value.shape()};
  r.constant = static_cast<std::int32_t>(graph_->constants_.size());
  graph_->constants_.push_back(std::move(value));
  return push(std::move(r));
}

NodeId GraphBuilder::binary(OpKind kind, NodeId a, NodeId b) {
  const Shape out = broadcast_shape(shape(a), shape(b));
  if (shape(a) != out) a = broadcast(a, out);
  if (shape(b) != out) b = broadcast(b, out);
  return push({kind, {a, b}, {}, out});
}

NodeId GraphBuilder::add(NodeId a, NodeId b) { return binary(OpKind::kAdd, a, b); }
NodeId GraphBuilder::sub(NodeId a, NodeId b) { return binary(OpKind::kSub, a, b); }
NodeId GraphBuilder::mul(NodeId a, NodeId b) { return binary(OpKind::kMul, a, b); }
NodeId GraphBuilder::div(NodeId a, NodeId b) { return binary(OpKind::kDiv, a, b); }

NodeId GraphBuilder::unary(OpKind kind, NodeId x) { return push({kind, {x}, {}, shape(x)}); }

NodeId GraphBuilder::matmul(NodeId a, NodeId b, bool transpose_b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2) throw ShapeError("matmul expects rank-2 operands");
  const std::size_t kb = transpose_b ? sb[1] : sb[0];
  const std::size_t n = transpose_b ? sb[0] : sb[1];
  if (sa[1] != kb) throw ShapeError("matmul inner dimensions differ: " + to_string(sa) + " x " + to_string(sb));
  OpRecord r{OpKind::kMatMul, {a, b}, {}, {sa[0], n}};
  r.attrs.transpose_b = transpose_b;
  return push(std::move(r));
}

NodeId GraphBuilder::conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t pad) {
  const Shape& sx = shape(x);
  const Shape& sw = shape(w);
  if (sx.size() != 3 || sw.size() != 4) throw ShapeError("conv2d expects x [C,H,W] and w [Co,Ci,K,K]");
  if (sw[1] != sx[0] || sw[2] != sw[3]) throw ShapeError("conv2d weight " + to_string(sw) + " vs input " + to_string(sx));
  if (stride == 0) throw UsageError("conv2d stride must be >= 1");
  const auto g = conv_geometry(sx, sw, stride, pad);
  if (g.out_h == 0 || g.out_w == 0) throw ShapeError("conv2d kernel larger than padded input");
  OpRecord r{OpKind::kConv2d, {x, w}, {}, {g.out_c, g.out_h, g.out_w}};
  r.attrs.stride = stride;
  r.attrs.pad = pad;
  return push(std::move(r));
}

NodeId GraphBuilder::conv2d_transpose(NodeId s, NodeId w, std::size_t stride, std::size_t pad, std::size_t out_h,
                                      std::size_t out_w) {
  const Shape& ss = shape(s);
  const Shape& sw = shape(w);
  if (ss.size() != 3 || sw.size() != 4) throw ShapeError("conv2d_transpose expects s [Co,Ho,Wo] and w [Co,Ci,K,K]");
  if (stride == 0) throw UsageError("conv2d_transpose stride must be >= 1");
  const auto g = conv_geometry({sw[1], out_h, out_w}, sw, stride, pad);
  if (sw[0] != ss[0] || g.out_h != ss[1] || g.out_w != ss[2])
    throw ShapeError("conv2d_transpose: " + to_string(ss) + " is not the conv2d image of [" + std::to_string(sw[1]) +
                     "," + std::to_string(out_h) + "," + std::to_string(out_w) + "]");
  OpRecord r{OpKind::kConv2dTranspose, {s, w}, {}, {sw[1], out_h, out_w}};
  r.attrs.stride = stride;
  r.attrs.pad = pad;
  return push(std::move(r));
}

NodeId GraphBuilder::relu(NodeId x) { return unary(OpKind::kRelu, x); }
NodeId GraphBuilder::sigmoid(NodeId x) { return unary(OpKind::kSigmoid, x); }
NodeId GraphBuilder::softplus(NodeId x) { return unary(OpKind::kSoftplus, x); }

std::size_t GraphBuilder::normalize_axis(NodeId x, int axis) const {
  const auto rank = static_cast<int>(shape(x).size());
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw UsageError("axis " + std::to_string(axis) + " out of range for " + to_string(shape(x)));
  return static_cast<std::size_t>(a);
}

NodeId GraphBuilder::softmax(NodeId x, int axis) {
  OpRecord r{OpKind::kSoftmax, {x}, {}, shape(x)};
  r.attrs.axis = static_cast<int>(normalize_axis(x, axis));
  return push(std::move(r));
}

NodeId GraphBuilder::log_softmax(NodeId x, int axis) {
  OpRecord r{OpKind::kLogSoftmax, {x}, {}, shape(x)};
  r.attrs.axis = static_cast<int>(normalize_axis(x, axis));
  return push(std::move(r));
}

NodeId GraphBuilder::sum(NodeId x) { return push({OpKind::kSum, {x}, {}, {1}}); }

NodeId GraphBuilder::sum(NodeId x, int axis) {
  const std::size_t a = normalize_axis(x, axis);
  Shape out = shape(x);
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(a));
  if (out.empty()) out = {1};
  OpRecord r{OpKind::kSumAxis, {x}, {}, std::move(out)};
  r.attrs.axis = static_cast<int>(a);
  return push(std::move(r));
}

NodeId GraphBuilder::mean(NodeId x) { return push({OpKind::kMean, {x}, {}, {1}}); }
NodeId GraphBuilder::max(NodeId x) { return push({OpKind::kMax, {x}, {}, {1}}); }

NodeId GraphBuilder::clamp(NodeId x, float lo, float hi) {
  if (!(lo <= hi)) throw UsageError("clamp bounds inverted");
  OpRecord r{OpKind::kClamp, {x}, {}, shape(x)};
  r.attrs.lo = lo;
  r.attrs.hi = hi;
  return push(std::move(r));
}

NodeId GraphBuilder::stabilize(NodeId x, float eps) {
  OpRecord r{OpKind::kStabilize, {x}, {}, shape(x)};
  r.attrs.lo = eps;
  return push(std::move(r));
}

NodeId GraphBuilder::broadcast(NodeId x, Shape out) {
  if (broadcast_shape(shape(x), out) != out)
    throw ShapeError("cannot broadcast " + to_string(shape(x)) + " to " + to_string(out));
  return push({OpKind::kBroadcast, {x}, {}, std::move(out)});
}

NodeId GraphBuilder::reshape(NodeId x, Shape out) {
  if (numel(out) != numel(shape(x))) throw ShapeError("cannot reshape " + to_string(shape(x)) + " to " + to_string(out));
  return push({OpKind::kReshape, {x}, {}, std::move(out)});
}

NodeId GraphBuilder::concat(std::span<const NodeId> parts, int axis) {
  if (parts.empty()) throw UsageError("concat of nothing");
  const std::size_t a = normalize_axis(parts[0], axis);
  Shape out = shape(parts[0]);
  out[a] = 0;
  for (auto p : parts) {
    Shape s = shape(p);
    if (s.size() != out.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != a && s[i] != out[i]) throw ShapeError("concat shape mismatch: " + to_string(s));
    out[a] += s[a];
  }
  OpRecord r{OpKind::kConcat, {parts.begin(), parts.end()}, {}, std::move(out)};
  r.attrs.axis = static_cast<int>(a);
  return push(std::move(r));
}

NodeId GraphBuilder::slice(NodeId x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t a = normalize_axis(x, axis);
  if (begin >= end || end > shape(x)[a]) throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                                                          ") out of range for " + to_string(shape(x)));
  Shape out = shape(x);
  out[a] = end - begin;
  OpRecord r{OpKind::kSlice, {x}, {}, std::move(out)};
  r.attrs.axis = static_cast<int>(a);
  r.attrs.begin = begin;
  r.attrs.end = end;
  return push(std::move(r));
}

void GraphBuilder::mark_output(std::string name, NodeId node) {
  check(node);
  graph_->outputs_[std::move(name)] = node;
}

std::shared_ptr<const Graph> GraphBuilder::finish() && {
  auto g = std::move(graph_);
  graph_ = std::make_shared<Graph>();
  return g;
}

// ---------------------------------------------------------------------------
// Graph

NodeId Graph::leaf(std::string_view name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) throw UsageError("no leaf named '" + std::string(name) + "'");
  return it->second;
}

NodeId Graph::output_node(std::string_view name) const {
  auto it = outputs_.find(name);
  if (it == outputs_.end()) throw UsageError("no output named '" + std::string(name) + "'");
  return it->second;
}

const Tensor& Graph::constant_value(NodeId id) const {
  const OpRecord& r = record(id);
  if (r.kind != OpKind::kConstant) throw UsageError("node is not a constant");
  return constants_[static_cast<std::size_t>(r.constant)];
}

const Tensor& Evaluation::output(std::string_view name) const { return value(graph_->output_node(name)); }

std::map<std::string, Tensor> Evaluation::outputs() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : graph_->output_names()) out.emplace(name, value(id));
  return out;
}

Evaluation Graph::evaluate(const Bindings& bindings) const {
  const auto& k = kernels::active();
  Evaluation eval;
  eval.graph_ = shared_from_this();
  auto& v = eval.values_;
  v.resize(records_.size());

  for (std::size_t i = 0; i < records_.size(); ++i) {
    const OpRecord& r = records_[i];
    auto in = [&](std::size_t j) -> const Tensor& { return v[r.operands[j].index]; };
    Tensor out;
    switch (r.kind) {
      case OpKind::kInput: {
        auto it = bindings.find(r.name);
        if (it == bindings.end()) throw UsageError("unbound leaf '" + r.name + "'");
        if (it->second.shape() != r.shape)
          throw ShapeError("leaf '" + r.name + "' expects " + to_string(r.shape) + ", got " +
                           to_string(it->second.shape()));
        out = it->second;
        break;
      }
      case OpKind::kConstant: out = constants_[static_cast<std::size_t>(r.constant)]; break;
      case OpKind::kAdd: out = Tensor(r.shape); k.add(out.size(), in(0).data(), in(1).data(), out.data()); break;
      case OpKind::kSub: out = Tensor(r.shape); k.sub(out.size(), in(0).data(), in(1).data(), out.data()); break;
      case OpKind::kMul: out = Tensor(r.shape); k.mul(out.size(), in(0).data(), in(1).data(), out.data()); break;
      case OpKind::kDiv: out = Tensor(r.shape); k.div(out.size(), in(0).data(), in(1).data(), out.data()); break;
      case OpKind::kMatMul: {
        out = Tensor(r.shape);
        const std::size_t m = r.shape[0], n = r.shape[1], kk = in(0).dim(1);
        if (r.attrs.transpose_b)
          k.gemm_nt(m, n, kk, in(0).data(), in(1).data(), out.data(), false);
        else
          k.gemm_nn(m, n, kk, in(0).data(), in(1).data(), out.data(), false);
        break;
      }
      case OpKind::kConv2d: {
        out = Tensor(r.shape);
        const auto g = conv_geometry(in(0).shape(), in(1).shape(), r.attrs.stride, r.attrs.pad);
        detail::conv_forward(g, in(0).data(), in(1).data(), out.data());
        break;
      }
      case OpKind::kConv2dTranspose: {
        out = Tensor(r.shape);
        const auto g = conv_geometry(r.shape, in(1).shape(), r.attrs.stride, r.attrs.pad);
        detail::conv_backward_input(g, in(1).data(), in(0).data(), out.data());
        break;
      }
      case OpKind::kRelu: out = Tensor(r.shape); k.relu(out.size(), in(0).data(), out.data()); break;
      case OpKind::kSigmoid:
        out = Tensor(r.shape);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = stable_sigmoid(in(0)[j]);
        break;
      case OpKind::kSoftplus:
        out = Tensor(r.shape);
        for (std::size_t j = 0; j < out.size(); ++j) {
          const float x = in(0)[j];
          out[j] = std::max(x, 0.0f) + std::log1p(std::exp(-std::fabs(x)));
        }
        break;
      case OpKind::kSoftmax:
      case OpKind::kLogSoftmax:
        out = Tensor(r.shape);
        softmax_forward(in(0), static_cast<std::size_t>(r.attrs.axis), r.kind == OpKind::kLogSoftmax, out);
        break;
      case OpKind::kSum: out = Tensor::scalar(static_cast<float>(k.sum(in(0).size(), in(0).data()))); break;
      case OpKind::kMean:
        out = Tensor::scalar(static_cast<float>(k.sum(in(0).size(), in(0).data()) / static_cast<double>(in(0).size())));
        break;
      case OpKind::kSumAxis: {
        out = Tensor(r.shape);
        const auto s = split_axis(in(0).shape(), static_cast<std::size_t>(r.attrs.axis));
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t j = 0; j < s.inner; ++j) {
            double acc = 0.0;
            for (std::size_t a = 0; a < s.len; ++a) acc += in(0)[(o * s.len + a) * s.inner + j];
            out[o * s.inner + j] = static_cast<float>(acc);
          }
        break;
      }
      case OpKind::kMax:
        out = Tensor::scalar(*std::max_element(in(0).data(), in(0).data() + in(0).size()));
        break;
      case OpKind::kClamp:
        out = Tensor(r.shape);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::clamp(in(0)[j], r.attrs.lo, r.attrs.hi);
        break;
      case OpKind::kStabilize:
        out = Tensor(r.shape);
        for (std::size_t j = 0; j < out.size(); ++j) {
          const float x = in(0)[j];
          out[j] = x >= 0.0f ? x + r.attrs.lo : x - r.attrs.lo;
        }
        break;
      case OpKind::kBroadcast: out = broadcast_to(in(0), r.shape); break;
      case OpKind::kReshape: out = in(0).reshaped(r.shape); break;
      case OpKind::kConcat: {
        out = Tensor(r.shape);
        const auto s = split_axis(r.shape, static_cast<std::size_t>(r.attrs.axis));
        std::size_t offset = 0;
        for (std::size_t p = 0; p < r.operands.size(); ++p) {
          const Tensor& part = in(p);
          const std::size_t len = part.dim(static_cast<std::size_t>(r.attrs.axis));
          for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(part.data() + o * len * s.inner, len * s.inner,
                        out.data() + (o * s.len + offset) * s.inner);
          offset += len;
        }
        break;
      }
      case OpKind::kSlice: {
        out = Tensor(r.shape);
        const auto s = split_axis(in(0).shape(), static_cast<std::size_t>(r.attrs.axis));
        const std::size_t len = r.attrs.end - r.attrs.begin;
        for (std::size_t o = 0; o < s.outer; ++o)
          std::copy_n(in(0).data() + (o * s.len + r.attrs.begin) * s.inner, len * s.inner,
                      out.data() + o * len * s.inner);
        break;
      }
    }
    if (!out.all_finite())
      throw NumericError("non-finite value produced by " + std::string(op_name(r.kind)) + " (node " +
                         std::to_string(i) + ")");
    v[i] = std::move(out);
  }
  return eval;
}

std::vector<Tensor> Graph::gradients(const Evaluation& eval, NodeId scalar, std::span<const NodeId> wrt) const {
  if (&eval.graph() != this) throw UsageError("evaluation belongs to a different graph");
  if (!scalar.valid() || scalar.index >= records_.size()) throw UsageError("scalar node out of range");
  if (records_[scalar.index].shape != Shape{1})
    throw ShapeError("gradient target must have shape [1], got " + to_string(records_[scalar.index].shape));
  for (auto w : wrt) {
    if (!w.valid() || w.index >= records_.size()) throw UsageError("wrt node out of range");
    const auto kind = records_[w.index].kind;
    if (kind != OpKind::kInput && kind != OpKind::kConstant) throw UsageError("gradient wrt a non-leaf node");
  }

  const auto& k = kernels::active();
  const std::size_t count = scalar.index + 1;
  std::vector<char> reach(count, 0);
  for (auto w : wrt)
    if (w.index < count) reach[w.index] = 1;
  for (std::size_t i = 0; i < count; ++i)
    for (auto op : records_[i].operands)
      if (reach[op.index]) reach[i] = 1;

  std::vector<Tensor> adj(count);
  adj[scalar.index] = Tensor::scalar(1.0f);

  auto accumulate = [&](NodeId target, Tensor g) {
    if (!reach[target.index]) return;
    Tensor& slot = adj[target.index];
    if (slot.size() == 0)
      slot = std::move(g);
    else
      k.add(slot.size(), slot.data(), g.data(), slot.data());
  };

  for (std::size_t i = count; i-- > 0;) {
    if (!reach[i] || adj[i].size() == 0) continue;
    const OpRecord& r = records_[i];
    if (r.kind == OpKind::kInput || r.kind == OpKind::kConstant) continue;
    const Tensor& g = adj[i];
    const Tensor& y = eval.values_[i];
    auto in = [&](std::size_t j) -> const Tensor& { return eval.values_[r.operands[j].index]; };
    auto wants = [&](std::size_t j) { return reach[r.operands[j].index] != 0; };
    const NodeId a = r.operands.empty() ? NodeId{} : r.operands[0];

    switch (r.kind) {
      case OpKind::kInput:
      case OpKind::kConstant: break;
      case OpKind::kAdd:
        if (wants(0)) accumulate(a, g);
        if (wants(1)) accumulate(r.operands[1], g);
        break;
      case OpKind::kSub:
        if (wants(0)) accumulate(a, g);
        if (wants(1)) {
          Tensor ng(r.shape);
          for (std::size_t j = 0; j < ng.size(); ++j) ng[j] = -g[j];
          accumulate(r.operands[1], std::move(ng));
        }
        break;
      case OpKind::kMul:
        if (wants(0)) {
          Tensor ga(r.shape);
          k.mul(ga.size(), g.data(), in(1).data(), ga.data());
          accumulate(a, std::move(ga));
        }
        if (wants(1)) {
          Tensor gb(r.shape);
          k.mul(gb.size(), g.data(), in(0).data(), gb.data());
          accumulate(r.operands[1], std::move(gb));
        }
        break;
      case OpKind::kDiv:
        if (wants(0)) {
          Tensor ga(r.shape);
          k.div(ga.size(), g.data(), in(1).data(), ga.data());
          accumulate(a, std::move(ga));
        }
        if (wants(1)) {
          Tensor gb(r.shape);
          for (std::size_t j = 0; j < gb.size(); ++j) gb[j] = -g[j] * y[j] / in(1)[j];
          accumulate(r.operands[1], std::move(gb));
        }
        break;
      case OpKind::kMatMul: {
        const Tensor& A = in(0);
        const Tensor& B = in(1);
        const std::size_t m = r.shape[0], n = r.shape[1], kk = A.dim(1);
        if (wants(0)) {
          Tensor ga(A.shape());
          if (r.attrs.transpose_b)
            k.gemm_nn(m, kk, n, g.data(), B.data(), ga.data(), false);
          else
            k.gemm_nt(m, kk, n, g.data(), B.data(), ga.data(), false);
          accumulate(a, std::move(ga));
        }
        if (wants(1)) {
          Tensor gb(B.shape());
          if (r.attrs.transpose_b)
            k.gemm_tn(n, kk, m, g.data(), A.data(), gb.data(), false);
          else
            k.gemm_tn(kk, n, m, A.data(), g.data(), gb.data(), false);
          accumulate(r.operands[1], std::move(gb));
        }
        break;
      }
      case OpKind::kConv2d: {
        const auto geo = conv_geometry(in(0).shape(), in(1).shape(), r.attrs.stride, r.attrs.pad);
        if (wants(0)) {
          Tensor gx(in(0).shape());
          detail::conv_backward_input(geo, in(1).data(), g.data(), gx.data());
          accumulate(a, std::move(gx));
        }
        if (wants(1)) {
          Tensor gw(in(1).shape());
          detail::conv_backward_weight(geo, in(0).data(), g.data(), gw.data());
          accumulate(r.operands[1], std::move(gw));
        }
        break;
      }
      case OpKind::kConv2dTranspose: {
        // y = J^T s where J is the conv2d operator of the output geometry.
        const auto geo = conv_geometry(r.shape, in(1).shape(), r.attrs.stride, r.attrs.pad);
        if (wants(0)) {
          Tensor gs(in(0).shape());
          detail::conv_forward(geo, g.data(), in(1).data(), gs.data());
          accumulate(a, std::move(gs));
        }
        if (wants(1)) {
          Tensor gw(in(1).shape());
          detail::conv_backward_weight(geo, g.data(), in(0).data(), gw.data());
          accumulate(r.operands[1], std::move(gw));
        }
        break;
      }
      case OpKind::kRelu: {
        Tensor gx(r.shape);
        k.relu_backward(gx.size(), in(0).data(), g.data(), gx.data());
        accumulate(a, std::move(gx));
        break;
      }
      case OpKind::kSigmoid: {
        Tensor gx(r.shape);
        for (std::size_t j = 0; j < gx.size(); ++j) gx[j] = g[j] * y[j] * (1.0f - y[j]);
        accumulate(a, std::move(gx));
        break;
      }
      case OpKind::kSoftplus: {
        Tensor gx(r.shape);
        for (std::size_t j = 0; j < gx.size(); ++j) gx[j] = g[j] * stable_sigmoid(in(0)[j]);
        accumulate(a, std::move(gx));
        break;
      }
      case OpKind::kSoftmax:
      case OpKind::kLogSoftmax: {
        Tensor gx(r.shape);
        const auto s = split_axis(r.shape, static_cast<std::size_t>(r.attrs.axis));
        const bool log_space = r.kind == OpKind::kLogSoftmax;
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t in_ = 0; in_ < s.inner; ++in_) {
            const std::size_t base = o * s.len * s.inner + in_;
            double dotp = 0.0;
            for (std::size_t c = 0; c < s.len; ++c) {
              const std::size_t j = base + c * s.inner;
              dotp += log_space ? g[j] : static_cast<double>(g[j]) * y[j];
            }
            for (std::size_t c = 0; c < s.len; ++c) {
              const std::size_t j = base + c * s.inner;
              gx[j] = log_space ? static_cast<float>(g[j] - std::exp(static_cast<double>(y[j])) * dotp)
                                : static_cast<float>(y[j] * (g[j] - dotp));
            }
          }
        accumulate(a, std::move(gx));
        break;
      }
      case OpKind::kSum: accumulate(a, Tensor(in(0).shape(), g[0])); break;
      case OpKind::kMean: accumulate(a, Tensor(in(0).shape(), g[0] / static_cast<float>(in(0).size()))); break;
      case OpKind::kSumAxis: {
        Tensor gx(in(0).shape());
        const auto s = split_axis(in(0).shape(), static_cast<std::size_t>(r.attrs.axis));
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t c = 0; c < s.len; ++c)
            std::copy_n(g.data() + o * s.inner, s.inner, gx.data() + (o * s.len + c) * s.inner);
        accumulate(a, std::move(gx));
        break;
      }
      case OpKind::kMax: {
        Tensor gx(in(0).shape());
        const auto* first = in(0).data();
        gx[static_cast<std::size_t>(std::max_element(first, first + in(0).size()) - first)] = g[0];
        accumulate(a, std::move(gx));
        break;
      }
      case OpKind::kClamp: {
        Tensor gx(r.shape);
        for (std::size_t j = 0; j < gx.size(); ++j) {
          const float x = in(0)[j];
          gx[j] = (x >= r.attrs.lo && x <= r.attrs.hi) ? g[j] : 0.0f;
        }
        accumulate(a, std::move(gx));
        break;
      }
      case OpKind::kStabilize:
      case OpKind::kReshape: accumulate(a, g.reshaped(in(0).shape())); break;
      case OpKind::kBroadcast: accumulate(a, reduce_to(g, in(0).shape())); break;
      case OpKind::kConcat: {
        const auto s = split_axis(r.shape, static_cast<std::size_t>(r.attrs.axis));
        std::size_t offset = 0;
        for (std::size_t p = 0; p < r.operands.size(); ++p) {
          const std::size_t len = in(p).dim(static_cast<std::size_t>(r.attrs.axis));
          if (wants(p)) {
            Tensor gp(in(p).shape());
            for (std::size_t o = 0; o < s.outer; ++o)
              std::copy_n(g.data() + (o * s.len + offset) * s.inner, len * s.inner, gp.data() + o * len * s.inner);
            accumulate(r.operands[p], std::move(gp));
          }
          offset += len;
        }
        break;
      }
      case OpKind::kSlice: {
        Tensor gx(in(0).shape());
        const auto s = split_axis(in(0).shape(), static_cast<std::size_t>(r.attrs.axis));
        const std::size_t len = r.attrs.end - r.attrs.begin;
        for (std::size_t o = 0; o < s.outer; ++o)
          std::copy_n(g.data() + o * len * s.inner, len * s.inner, gx.data() + (o * s.len + r.attrs.begin) * s.inner);
        accumulate(a, std::move(gx));
        break;
      }
    }
    if (i != scalar.index) adj[i] = Tensor();  // release
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (auto w : wrt) {
    if (w.index < count && adj[w.index].size() != 0)
      result.push_back(adj[w.index]);
    else
      result.emplace_back(records_[w.index].shape);
  }
  for (const auto& t : result)
    if (!t.all_finite()) throw NumericError("non-finite gradient");
  return result;
}

Tensor Graph::gradient(const Evaluation& eval, NodeId scalar, NodeId wrt) const {
  const NodeId one[] = {wrt};
  return std::move(gradients(eval, scalar, one).front());
}

}  // namespace rad
