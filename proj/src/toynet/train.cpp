#include "rad/toynet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "rad/core/error.hpp"
#include "rad/toynet/detect.hpp"

namespace rad::toynet {

void TrainConfig::validate() const {
  if (epochs == 0) throw UsageError("epochs must be positive");
  if (batch_size == 0) throw UsageError("batch size must be positive");
  if (!(learning_rate >= 0.0f) || !std::isfinite(learning_rate)) throw UsageError("learning rate must be >= 0");
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw UsageError("momentum must be in [0, 1)");
}

LossGraph build_loss_graph(const Model& model) {
  const HeadLayout& h = model.head();
  const std::size_t a = h.anchors, g = h.grid, c = h.classes;
  GraphBuilder b;
  const ForwardNodes fwd = build_forward(b, model, WeightBinding::kLeaves);
  const NodeId head = b.reshape(fwd.head, {a, h.values_per_anchor(), g, g});

  const NodeId obj_target = b.input("obj_target", {a, 1, g, g});
  const NodeId pos_mask = b.input("pos_mask", {a, 1, g, g});
  const NodeId box_target = b.input("box_target", {a, 4, g, g});
  const NodeId class_target = b.input("class_target", {a, c, g, g});

  const NodeId offsets = b.slice(head, 1, kTx, kTh + 1);
  const NodeId objectness = b.slice(head, 1, kObjectness, kObjectness + 1);
  const NodeId logits = b.slice(head, 1, kFirstClass, kFirstClass + c);

  // BCE with logits: softplus(z) - y z.
  const NodeId obj_loss = b.sum(b.sub(b.softplus(objectness), b.mul(obj_target, objectness)));
  const NodeId diff = b.sub(offsets, box_target);
  const NodeId box_loss = b.sum(b.mul(pos_mask, b.mul(diff, diff)));
  const NodeId cls_loss = b.sum(b.mul(class_target, b.log_softmax(logits, 1)));
  const NodeId loss = b.sub(b.add(b.mul(b.scalar(kObjectnessWeight), obj_loss), b.mul(b.scalar(kBoxWeight), box_loss)),
                            b.mul(b.scalar(kClassWeight), cls_loss));
  b.mark_output("loss", loss);

  LossGraph out;
  out.graph = std::move(b).finish();
  out.loss = loss;
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    out.parameters.push_back(out.graph->leaf(weight_leaf(l)));
    out.parameters.push_back(out.graph->leaf(bias_leaf(l)));
  }
  return out;
}

std::size_t assign_anchor(const HeadLayout& head, const Box& box) {
  const float stride = static_cast<float>(head.cell_stride());
  const auto clamp_cell = [&](float v) {
    return static_cast<std::size_t>(std::clamp(std::floor(v / stride), 0.0f, static_cast<float>(head.grid - 1)));
  };
  const std::size_t cell = clamp_cell(box.center_y()) * head.grid + clamp_cell(box.center_x());
  std::size_t best = 0;
  float best_iou = -1.0f;
  for (std::size_t k = 0; k < head.anchors; ++k) {
    const float s = head.anchor_sizes[k];
    const float inter = std::min(box.w, s) * std::min(box.h, s);
    const float shape_iou = inter / (box.w * box.h + s * s - inter);
    if (shape_iou > best_iou) {
      best_iou = shape_iou;
      best = k;
    }
  }
  return cell * head.anchors + best;
}

void bind_sample(const HeadLayout& head, const corpus::Sample& sample, Bindings& bindings) {
  const std::size_t a = head.anchors, g = head.grid, c = head.classes, cells = g * g;
  Tensor obj({a, 1, g, g}), mask({a, 1, g, g}), box({a, 4, g, g}), cls({a, c, g, g});
  for (const auto& ann : sample.annotations) {
    if (ann.class_id >= c) throw UsageError("annotation class " + std::to_string(ann.class_id) + " >= " + std::to_string(c));
    const std::size_t index = assign_anchor(head, ann.box);
    const std::size_t anchor = index % a, cell = index / a;
    const auto t = encode_box(head, index, ann.box);
    obj[anchor * cells + cell] = 1.0f;
    mask[anchor * cells + cell] = 1.0f;
    for (std::size_t k = 0; k < 4; ++k) box[(anchor * 4 + k) * cells + cell] = t[k];
    for (std::size_t k = 0; k < c; ++k) cls[(anchor * c + k) * cells + cell] = k == ann.class_id ? 1.0f : 0.0f;
  }
  bindings.insert_or_assign("image", to_chw(sample.image));
  bindings.insert_or_assign("obj_target", std::move(obj));
  bindings.insert_or_assign("pos_mask", std::move(mask));
  bindings.insert_or_assign("box_target", std::move(box));
  bindings.insert_or_assign("class_target", std::move(cls));
}

TrainResult train(Model model, const std::vector<corpus::Sample>& corpus, const TrainConfig& config,
                  const ProgressFn& progress) {
  config.validate();
  if (corpus.empty()) throw UsageError("training corpus is empty");
  const LossGraph lg = build_loss_graph(model);

  std::vector<Tensor*> params;
  for (auto& layer : model.layers()) {
    params.push_back(&layer.weight.values());
    params.push_back(&layer.bias);
  }
  std::vector<Tensor> velocity, grad_sum;
  for (Tensor* p : params) {
    velocity.emplace_back(p->shape());
    grad_sum.emplace_back(p->shape());
  }

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed);

  TrainResult result{model, {}, {}};
  Bindings bindings;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      for (auto& g : grad_sum) std::fill(g.values().begin(), g.values().end(), 0.0f);
      double batch_loss = 0.0;
      bind_weights(model, bindings);
      for (std::size_t i = start; i < end; ++i) {
        bind_sample(model.head(), corpus[order[i]], bindings);
        Evaluation eval = [&] {
          try {
            return lg.graph->evaluate(bindings);
          } catch (const NumericError& e) {
            throw NumericError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
          }
        }();
        const double loss = eval.value(lg.loss)[0];
        if (!std::isfinite(loss)) throw NumericError("training diverged in epoch " + std::to_string(epoch));
        batch_loss += loss;
        const auto grads = lg.graph->gradients(eval, lg.loss, lg.parameters);
        for (std::size_t p = 0; p < grads.size(); ++p)
          for (std::size_t k = 0; k < grads[p].size(); ++k) grad_sum[p][k] += grads[p][k];
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& w = *params[p];
        Tensor& v = velocity[p];
        for (std::size_t k = 0; k < w.size(); ++k) {
          v[k] = config.momentum * v[k] + grad_sum[p][k] * inv;
          w[k] -= config.learning_rate * v[k];
        }
        if (!w.all_finite()) throw NumericError("training diverged in epoch " + std::to_string(epoch));
      }
      result.step_losses.push_back(batch_loss / static_cast<double>(end - start));
      epoch_loss += batch_loss;
    }
    epoch_loss /= static_cast<double>(corpus.size());
    result.epoch_losses.push_back(epoch_loss);
    if (progress) progress(epoch, epoch_loss);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace rad::toynet
