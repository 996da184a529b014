#include "reference_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rad/core/error.hpp"

namespace rad::detail {
namespace {

using Values = std::vector<double>;

struct Split {
  std::size_t outer, len, inner;
};

Split split(const Shape& s, std::size_t axis) {
  Split r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Values broadcast(const Values& in, const Shape& in_shape, const Shape& out_shape) {
  const std::size_t n = numel(out_shape);
  Values out(n);
  const std::size_t offset = out_shape.size() - in_shape.size();
  std::vector<std::size_t> idx(out_shape.size());
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat;
    for (std::size_t d = out_shape.size(); d-- > 0;) {
      idx[d] = rem % out_shape[d];
      rem /= out_shape[d];
    }
    std::size_t src = 0;
    for (std::size_t d = 0; d < in_shape.size(); ++d)
      src = src * in_shape[d] + (in_shape[d] == 1 ? 0 : idx[d + offset]);
    out[flat] = in[src];
  }
  return out;
}

// Direct convolution; returns [Co,Ho,Wo].
Values conv(const Values& x, const Shape& xs, const Values& w, const Shape& ws, std::size_t stride, std::size_t pad,
            std::size_t oh, std::size_t ow) {
  const std::size_t co = ws[0], ci = ws[1], k = ws[2];
  Values out(co * oh * ow, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs[1]) || ix >= static_cast<long>(xs[2])) continue;
              acc += x[(c * xs[1] + static_cast<std::size_t>(iy)) * xs[2] + static_cast<std::size_t>(ix)] *
                     w[((o * ci + c) * k + ky) * k + kx];
            }
        out[(o * oh + oy) * ow + ox] = acc;
      }
  return out;
}

// Adjoint of conv: s [Co,Ho,Wo] -> [Ci,H,W].
Values conv_transpose(const Values& s, const Shape& ss, const Values& w, const Shape& ws, std::size_t stride,
                      std::size_t pad, std::size_t h, std::size_t wd) {
  const std::size_t co = ws[0], ci = ws[1], k = ws[2];
  Values out(ci * h * wd, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t oy = 0; oy < ss[1]; ++oy)
      for (std::size_t ox = 0; ox < ss[2]; ++ox) {
        const double sv = s[(o * ss[1] + oy) * ss[2] + ox];
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
              out[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] +=
                  sv * w[((o * ci + c) * k + ky) * k + kx];
            }
      }
  return out;
}

}  // namespace

std::vector<double> evaluate_reference(const Graph& graph, const Bindings& bindings, NodeId target,
                                       const Perturbation& perturbation) {
  const auto& records = graph.records();
  if (!target.valid() || target.index >= records.size()) throw UsageError("reference target out of range");
  std::vector<Values> v(target.index + 1);

  for (std::size_t i = 0; i <= target.index; ++i) {
    const OpRecord& r = records[i];
    auto in = [&](std::size_t j) -> const Values& { return v[r.operands[j].index]; };
    auto in_shape = [&](std::size_t j) -> const Shape& { return records[r.operands[j].index].shape; };
    const std::size_t n = numel(r.shape);
    Values out;
    switch (r.kind) {
      case OpKind::kInput: {
        auto it = bindings.find(r.name);
        if (it == bindings.end()) throw UsageError("unbound leaf '" + r.name + "'");
        if (it->second.shape() != r.shape) throw ShapeError("leaf '" + r.name + "' shape mismatch");
        out.assign(it->second.data(), it->second.data() + it->second.size());
        break;
      }
      case OpKind::kConstant: {
        const Tensor& t = graph.constant_value(NodeId{static_cast<std::uint32_t>(i)});
        out.assign(t.data(), t.data() + t.size());
        break;
      }
      case OpKind::kAdd:
      case OpKind::kSub:
      case OpKind::kMul:
      case OpKind::kDiv:
        out.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
          const double a = in(0)[j], b = in(1)[j];
          out[j] = r.kind == OpKind::kAdd   ? a + b
                   : r.kind == OpKind::kSub ? a - b
                   : r.kind == OpKind::kMul ? a * b
                                            : a / b;
        }
        break;
      case OpKind::kMatMul: {
        const std::size_t m = r.shape[0], cols = r.shape[1], k = in_shape(0)[1];
        out.assign(n, 0.0);
        for (std::size_t a = 0; a < m; ++a)
          for (std::size_t b = 0; b < cols; ++b) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p)
              acc += in(0)[a * k + p] * (r.attrs.transpose_b ? in(1)[b * k + p] : in(1)[p * cols + b]);
            out[a * cols + b] = acc;
          }
        break;
      }
      case OpKind::kConv2d:
        out = conv(in(0), in_shape(0), in(1), in_shape(1), r.attrs.stride, r.attrs.pad, r.shape[1], r.shape[2]);
        break;
      case OpKind::kConv2dTranspose:
        out = conv_transpose(in(0), in_shape(0), in(1), in_shape(1), r.attrs.stride, r.attrs.pad, r.shape[1],
                             r.shape[2]);
        break;
      case OpKind::kRelu:
        out.resize(n);
        for (std::size_t j = 0; j < n; ++j) out[j] = std::max(in(0)[j], 0.0);
        break;
      case OpKind::kSigmoid:
        out.resize(n);
        for (std::size_t j = 0; j < n; ++j) out[j] = 1.0 / (1.0 + std::exp(-in(0)[j]));
        break;
      case OpKind::kSoftplus:
        out.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
          const double x = in(0)[j];
          out[j] = std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
        }
        break;
      case OpKind::kSoftmax:
      case OpKind::kLogSoftmax: {
        out.resize(n);
        const auto s = split(r.shape, static_cast<std::size_t>(r.attrs.axis));
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t q = 0; q < s.inner; ++q) {
            const std::size_t base = o * s.len * s.inner + q;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < s.len; ++c) mx = std::max(mx, in(0)[base + c * s.inner]);
            double total = 0.0;
            for (std::size_t c = 0; c < s.len; ++c) total += std::exp(in(0)[base + c * s.inner] - mx);
            for (std::size_t c = 0; c < s.len; ++c) {
              const double z = in(0)[base + c * s.inner] - mx;
              out[base + c * s.inner] = r.kind == OpKind::kLogSoftmax ? z - std::log(total) : std::exp(z) / total;
            }
          }
        break;
      }
      case OpKind::kSum:
      case OpKind::kMean: {
        double acc = 0.0;
        for (double x : in(0)) acc += x;
        out = {r.kind == OpKind::kMean ? acc / static_cast<double>(in(0).size()) : acc};
        break;
      }
      case OpKind::kSumAxis: {
        out.assign(n, 0.0);
        const auto s = split(in_shape(0), static_cast<std::size_t>(r.attrs.axis));
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t c = 0; c < s.len; ++c)
            for (std::size_t q = 0; q < s.inner; ++q) out[o * s.inner + q] += in(0)[(o * s.len + c) * s.inner + q];
        break;
      }
      case OpKind::kMax: out = {*std::max_element(in(0).begin(), in(0).end())}; break;
      case OpKind::kClamp:
        out.resize(n);
        for (std::size_t j = 0; j < n; ++j) out[j] = std::clamp(in(0)[j], double{r.attrs.lo}, double{r.attrs.hi});
        break;
      case OpKind::kStabilize:
        out.resize(n);
        for (std::size_t j = 0; j < n; ++j) out[j] = in(0)[j] >= 0.0 ? in(0)[j] + r.attrs.lo : in(0)[j] - r.attrs.lo;
        break;
      case OpKind::kBroadcast: out = broadcast(in(0), in_shape(0), r.shape); break;
      case OpKind::kReshape: out = in(0); break;
      case OpKind::kConcat: {
        out.resize(n);
        const auto s = split(r.shape, static_cast<std::size_t>(r.attrs.axis));
        std::size_t offset = 0;
        for (std::size_t p = 0; p < r.operands.size(); ++p) {
          const std::size_t len = in_shape(p)[static_cast<std::size_t>(r.attrs.axis)];
          for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(in(p).begin() + static_cast<std::ptrdiff_t>(o * len * s.inner), len * s.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * s.len + offset) * s.inner));
          offset += len;
        }
        break;
      }
      case OpKind::kSlice: {
        out.resize(n);
        const auto s = split(in_shape(0), static_cast<std::size_t>(r.attrs.axis));
        const std::size_t len = r.attrs.end - r.attrs.begin;
        for (std::size_t o = 0; o < s.outer; ++o)
          std::copy_n(in(0).begin() + static_cast<std::ptrdiff_t>((o * s.len + r.attrs.begin) * s.inner),
                      len * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
        break;
      }
    }
    if (perturbation.leaf.valid() && perturbation.leaf.index == i) out.at(perturbation.index) += perturbation.delta;
    v[i] = std::move(out);
  }
  return std::move(v[target.index]);
}

}  // namespace rad::detail
