#include "rad/attack/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rad/core/error.hpp"
#include "rad/toynet/train.hpp"

namespace rad::attack {

using nlohmann::json;
using toynet::Detection;

// ---------------------------------------------------------------------------
// Configuration parsing

Selection Selection::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw UsageError("node selection must be static:K or dynamic:TAU, got '" + text + "'");
  const std::string mode = text.substr(0, colon), value = text.substr(colon + 1);
  Selection s;
  try {
    std::size_t used = 0;
    if (mode == "static") {
      const long k = std::stol(value, &used);
      if (used != value.size() || k <= 0) throw UsageError("");
      s.mode = Mode::kStatic;
      s.k = static_cast<std::size_t>(k);
    } else if (mode == "dynamic") {
      s.tau = std::stof(value, &used);
      if (used != value.size() || !std::isfinite(s.tau)) throw UsageError("");
      s.mode = Mode::kDynamic;
    } else {
      throw UsageError("");
    }
  } catch (const std::exception&) {
    throw UsageError("invalid node selection '" + text + "' (static:K with K >= 1, or dynamic:TAU)");
  }
  return s;
}

std::string Selection::to_string() const {
  if (mode == Mode::kStatic) return "static:" + std::to_string(k);
  json j = tau;
  return "dynamic:" + j.dump();
}

TechniqueConfig TechniqueConfig::parse(const std::string& text) {
  const auto colon = text.find(':');
  const std::string name = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  auto count = [&](std::size_t fallback) -> std::size_t {
    if (arg.empty()) return fallback;
    std::size_t used = 0;
    long v = -1;
    try {
      v = std::stol(arg, &used);
    } catch (const std::exception&) {
    }
    if (used != arg.size() || v < 0) throw UsageError("invalid technique parameter in '" + text + "'");
    return static_cast<std::size_t>(v);
  };
  TechniqueConfig t;
  if (name == "none" && arg.empty()) {
    t.kind = Technique::kNone;
  } else if (name == "si") {
    t.kind = Technique::kScale;
    t.scales = count(4);
  } else if (name == "di" && arg.empty()) {
    t.kind = Technique::kDiverse;
  } else if (name == "ti") {
    t.kind = Technique::kTranslate;
    t.kernel = count(15);
  } else if (name == "mi" && arg.empty()) {
    t.kind = Technique::kMomentum;
  } else {
    throw UsageError("unknown technique '" + text + "' (none, si[:K], di, ti[:K], mi)");
  }
  return t;
}

std::string TechniqueConfig::to_string() const {
  switch (kind) {
    case Technique::kNone: return "none";
    case Technique::kScale: return "si:" + std::to_string(scales);
    case Technique::kDiverse: return "di";
    case Technique::kTranslate: return "ti:" + std::to_string(kernel);
    case Technique::kMomentum: return "mi";
  }
  return "?";
}

Reduction parse_reduction(const std::string& text) {
  if (text == "sum") return Reduction::kSignedSum;
  if (text == "positive") return Reduction::kPositiveSum;
  if (text == "l2") return Reduction::kSquaredSum;
  throw UsageError("unknown reduction '" + text + "' (sum, positive, l2)");
}

const char* reduction_name(Reduction r) {
  switch (r) {
    case Reduction::kSignedSum: return "sum";
    case Reduction::kPositiveSum: return "positive";
    case Reduction::kSquaredSum: return "l2";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "rad") return Method::kRad;
  if (text == "dfool") return Method::kDfool;
  if (text == "loc") return Method::kLoc;
  if (text == "dag") return Method::kDag;
  if (text == "pgd") return Method::kPgd;
  throw UsageError("unknown attack method '" + text + "' (rad, dfool, loc, dag, pgd)");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::kRad: return "rad";
    case Method::kDfool: return "dfool";
    case Method::kLoc: return "loc";
    case Method::kDag: return "dag";
    case Method::kPgd: return "pgd";
  }
  return "?";
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0f) || !std::isfinite(epsilon)) throw UsageError("epsilon must be >= 0");
  if (!(alpha > 0.0f) || !std::isfinite(alpha)) throw UsageError("alpha must be > 0");
  if (iterations == 0) throw UsageError("iterations must be >= 1");
  if (selection.mode == Selection::Mode::kStatic && selection.k == 0) throw UsageError("static k must be >= 1");
  if (technique.kind == Technique::kTranslate && technique.kernel % 2 == 0)
    throw UsageError("TI kernel size must be odd");
  if (technique.kind == Technique::kDiverse &&
      (technique.diverse_copies == 0 || !(technique.diverse_prob >= 0.0f && technique.diverse_prob <= 1.0f) ||
       !(technique.diverse_ratio > 0.0f && technique.diverse_ratio <= 1.0f)))
    throw UsageError("DI needs copies >= 1, probability and ratio in (0, 1]");
}

json AttackConfig::to_json() const {
  return {{"epsilon", epsilon},
          {"alpha", alpha},
          {"iterations", iterations},
          {"nodes", selection.to_string()},
          {"target", relevance::target_kind_name(kind)},
          {"technique", technique.to_string()},
          {"reduction", reduction_name(reduction)},
          {"seed", seed}};
}

AttackConfig AttackConfig::from_json(const json& j) {
  AttackConfig c;
  try {
    if (j.contains("epsilon")) c.epsilon = j["epsilon"].get<float>();
    if (j.contains("alpha")) c.alpha = j["alpha"].get<float>();
    if (j.contains("iterations")) c.iterations = j["iterations"].get<std::size_t>();
    if (j.contains("nodes")) c.selection = Selection::parse(j["nodes"].get<std::string>());
    if (j.contains("target")) c.kind = relevance::parse_target_kind(j["target"].get<std::string>());
    if (j.contains("technique")) c.technique = TechniqueConfig::parse(j["technique"].get<std::string>());
    if (j.contains("reduction")) c.reduction = parse_reduction(j["reduction"].get<std::string>());
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("attack config: ") + e.what());
  }
  c.validate();
  return c;
}

json AttackTrace::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows)
    rows_json.push_back({{"loss", r.loss}, {"targets", r.targets}, {"detections", r.detections}, {"linf", r.linf}});
  return {{"rows", rows_json}, {"stop", stop}};
}

// ---------------------------------------------------------------------------
// Selection

std::vector<Detection> candidate_pool(std::span<const Detection> all) {
  std::vector<Detection> out;
  for (const auto& d : all)
    if (d.confidence >= relevance::kCandidateFloor) out.push_back(d);
  toynet::sort_by_confidence(out);
  return out;
}

TargetSet select_nodes(std::span<const Detection> pool, const Selection& selection, TargetKind kind) {
  std::vector<Detection> chosen;
  if (selection.mode == Selection::Mode::kStatic) {
    chosen = candidate_pool(pool);
    if (chosen.size() > selection.k) chosen.resize(selection.k);
  } else {
    for (const auto& d : pool)
      if (d.score > selection.tau) chosen.push_back(d);
    toynet::sort_by_confidence(chosen);
  }
  if (chosen.empty()) throw EmptyTargetError("no boxes selected");
  TargetSet t{kind, {}};
  for (const auto& d : chosen)
    for (const auto& n : relevance::nodes_for(d, kind)) t.nodes.push_back(n);
  return t;
}

// ---------------------------------------------------------------------------
// Objectives

NodeId rad_loss(const relevance::RelevanceGraph& graph, Reduction reduction) {
  switch (reduction) {
    case Reduction::kSignedSum: return graph.signed_sum();
    case Reduction::kPositiveSum: return graph.positive_sum();
    case Reduction::kSquaredSum: return graph.squared_sum();
  }
  throw UsageError("unknown reduction");
}

RadObjective::RadObjective(const toynet::Model& model, const AttackConfig& config)
    : graph_(model, config.kind), selection_(config.selection), loss_(rad_loss(graph_, config.reduction)) {}

std::size_t RadObjective::retarget(const Tensor&, std::span<const Detection> pool) {
  targets_ = select_nodes(pool, selection_, graph_.kind());
  pool_.assign(pool.begin(), pool.end());
  return targets_.size();
}

namespace {

double evaluate_with_gradient(const Graph& graph, const Bindings& bindings, NodeId loss, NodeId image,
                              Tensor& gradient) {
  const Evaluation eval = graph.evaluate(bindings);
  gradient = toynet::to_hwc(graph.gradient(eval, loss, image));
  return eval.value(loss)[0];
}

}  // namespace

double RadObjective::value_and_gradient(const Tensor& x, Tensor& gradient) {
  const Bindings bindings = graph_.bind(x, targets_, pool_);
  return evaluate_with_gradient(graph_.graph(), bindings, loss_, graph_.image(), gradient);
}

namespace {

using toynet::HeadLayout;

// Prediction-space losses on the head of a constant-weight forward graph.
// Masks are leaves so targets can change between iterations.
class HeadObjective : public Objective {
 public:
  HeadObjective(const toynet::Model& model, Method method, const Tensor& x0, std::uint64_t seed)
      : model_(model), method_(method) {
    const HeadLayout& h = model.head();
    const std::size_t a = h.anchors, g = h.grid, c = h.classes, v = h.values_per_anchor();
    GraphBuilder b;
    const auto fwd = toynet::build_forward(b, model, toynet::WeightBinding::kConstant);
    image_ = fwd.image;
    const NodeId head4 = b.reshape(fwd.head, {a, v, g, g});
    const NodeId logits = b.slice(head4, 1, toynet::kFirstClass, toynet::kFirstClass + c);
    switch (method) {
      case Method::kDfool: {
        const NodeId obj = b.sigmoid(b.slice(head4, 1, toynet::kObjectness, toynet::kObjectness + 1));
        const NodeId conf = b.mul(obj, b.softmax(logits, 1));
        loss_ = b.sum(b.mul(b.input("mask", {a, c, g, g}), conf));
        break;
      }
      case Method::kLoc:
        loss_ = b.sum(b.mul(b.input("mask", {a * v, g, g}), fwd.head));
        break;
      case Method::kDag:
        loss_ = b.sub(b.sum(b.mul(b.input("mask", {a, c, g, g}), logits)),
                      b.sum(b.mul(b.input("adv_mask", {a, c, g, g}), logits)));
        break;
      default: throw UsageError("not a head objective");
    }
    graph_ = std::move(b).finish();

    // Original boxes: post-NMS detections of the clean image; DAG keeps the
    // clean labels of every box and draws a fixed wrong label for each.
    const auto clean = toynet::decode_all(h, toynet::forward(model, x0));
    original_ = toynet::nms(candidates_above(clean, toynet::kDefaultConfThresh), toynet::kDefaultNmsIou);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> shift(1, std::max<std::size_t>(c, 2) - 1);
    for (const auto& d : clean) {
      clean_label_.push_back(d.class_id);
      adv_label_.push_back(c > 1 ? (d.class_id + shift(rng)) % c : d.class_id);
    }
  }

  std::size_t retarget(const Tensor&, std::span<const Detection> pool) override {
    const HeadLayout& h = model_.head();
    const std::size_t cells = h.grid * h.grid;
    auto class_offset = [&](std::size_t box, std::size_t cls) {
      return ((box % h.anchors) * h.classes + cls) * cells + box / h.anchors;
    };
    bindings_.clear();
    std::size_t count = 0;
    if (method_ == Method::kDfool) {
      Tensor mask({h.anchors, h.classes, h.grid, h.grid});
      for (const auto& d : original_) mask[class_offset(d.box_index, d.class_id)] = 1.0f;
      bindings_.emplace("mask", std::move(mask));
      count = original_.size();
    } else if (method_ == Method::kLoc) {
      Tensor mask({h.channels(), h.grid, h.grid});
      for (const auto& d : original_) {
        mask[toynet::head_offset(h, d.box_index, toynet::kTw)] = 1.0f;
        mask[toynet::head_offset(h, d.box_index, toynet::kTh)] = 1.0f;
      }
      bindings_.emplace("mask", std::move(mask));
      count = original_.size();
    } else {
      std::vector<Detection> active;
      for (const auto& d : pool)
        if (d.confidence > kDagFloor && d.class_id == clean_label_[d.box_index]) active.push_back(d);
      toynet::sort_by_confidence(active);
      if (active.size() > h.box_count()) active.resize(h.box_count());
      Tensor mask({h.anchors, h.classes, h.grid, h.grid}), adv({h.anchors, h.classes, h.grid, h.grid});
      for (const auto& d : active) {
        mask[class_offset(d.box_index, clean_label_[d.box_index])] = 1.0f;
        adv[class_offset(d.box_index, adv_label_[d.box_index])] = 1.0f;
      }
      bindings_.emplace("mask", std::move(mask));
      bindings_.emplace("adv_mask", std::move(adv));
      count = active.size();
    }
    if (count == 0) throw EmptyTargetError(std::string(method_name(method_)) + ": no boxes to attack");
    return count;
  }

  double value_and_gradient(const Tensor& x, Tensor& gradient) override {
    Bindings b = bindings_;
    b.insert_or_assign("image", toynet::to_chw(x));
    return evaluate_with_gradient(*graph_, b, loss_, image_, gradient);
  }

 private:
  static constexpr float kDagFloor = 0.01f;

  static std::vector<Detection> candidates_above(const std::vector<Detection>& all, float thresh) {
    std::vector<Detection> out;
    for (const auto& d : all)
      if (d.confidence >= thresh) out.push_back(d);
    return out;
  }

  const toynet::Model& model_;
  Method method_;
  std::shared_ptr<const Graph> graph_;
  NodeId image_, loss_;
  Bindings bindings_;
  std::vector<Detection> original_;
  std::vector<std::size_t> clean_label_, adv_label_;
};

// PGD: ascent on the training loss with the clean detections as labels.
class PgdObjective : public Objective {
 public:
  PgdObjective(const toynet::Model& model, const Tensor& x0) : model_(model), loss_graph_(toynet::build_loss_graph(model)) {
    corpus::Sample pseudo;
    pseudo.image = x0;
    for (const auto& d : toynet::detect(model, x0))
      pseudo.annotations.push_back({clip_box(d.box, model.head()), d.class_id});
    toynet::bind_weights(model, bindings_);
    toynet::bind_sample(model.head(), pseudo, bindings_);
    image_ = loss_graph_.graph->leaf("image");
  }

  std::size_t retarget(const Tensor&, std::span<const Detection>) override { return 1; }

  double value_and_gradient(const Tensor& x, Tensor& gradient) override {
    bindings_.insert_or_assign("image", toynet::to_chw(x));
    const double v = evaluate_with_gradient(*loss_graph_.graph, bindings_, loss_graph_.loss, image_, gradient);
    for (float& g : gradient.values()) g = -g;
    return -v;
  }

 private:
  static Box clip_box(const Box& b, const HeadLayout& h) {
    const float s = static_cast<float>(h.input_side);
    const float x0 = std::clamp(b.x, 0.0f, s - 1.0f), y0 = std::clamp(b.y, 0.0f, s - 1.0f);
    const float x1 = std::clamp(b.right(), x0 + 1.0f, s), y1 = std::clamp(b.bottom(), y0 + 1.0f, s);
    return {x0, y0, x1 - x0, y1 - y0};
  }

  const toynet::Model& model_;
  toynet::LossGraph loss_graph_;
  Bindings bindings_;
  NodeId image_;
};

}  // namespace

std::unique_ptr<Objective> make_objective(Method method, const toynet::Model& model, const Tensor& x0,
                                          const AttackConfig& config) {
  switch (method) {
    case Method::kRad: return std::make_unique<RadObjective>(model, config);
    case Method::kPgd: return std::make_unique<PgdObjective>(model, x0);
    default: return std::make_unique<HeadObjective>(model, method, x0, config.seed);
  }
}

// ---------------------------------------------------------------------------
// Techniques

Tensor gaussian_kernel(std::size_t size, float sigma) {
  if (size % 2 == 0) throw UsageError("kernel size must be odd");
  Tensor k({size, size});
  const double c = static_cast<double>(size / 2);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double dy = static_cast<double>(i) - c, dx = static_cast<double>(j) - c;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      k[i * size + j] = static_cast<float>(v);
      total += v;
    }
  for (float& v : k.values()) v = static_cast<float>(v / total);
  return k;
}

Tensor smooth(const Tensor& field, const Tensor& kernel) {
  const std::size_t h = field.dim(0), w = field.dim(1), ch = field.dim(2), ks = kernel.dim(0);
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(ks / 2);
  Tensor out(field.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + i;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::ptrdiff_t j = -r; j <= r; ++j) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + j;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
            acc += static_cast<double>(kernel[static_cast<std::size_t>((i + r) * static_cast<std::ptrdiff_t>(ks) + j + r)]) *
                   field[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * ch + c];
          }
        }
        out[(y * w + x) * ch + c] = static_cast<float>(acc);
      }
  return out;
}

namespace {

// Bilinear downscale to `inner` pixels, then white padding back to full size
// at offset (ox, oy). Linear in x apart from the constant padding, so the
// gradient maps back through the transpose of the resampling weights.
struct DiverseTransform {
  std::size_t side, inner, ox, oy;

  struct Tap {
    std::size_t i0, i1;
    float w1;
  };
  Tap tap(std::size_t o) const {
    const float src = std::clamp((static_cast<float>(o) + 0.5f) * static_cast<float>(side) / static_cast<float>(inner) - 0.5f,
                                 0.0f, static_cast<float>(side - 1));
    const std::size_t i0 = static_cast<std::size_t>(src);
    return {i0, std::min(i0 + 1, side - 1), src - static_cast<float>(i0)};
  }

  Tensor apply(const Tensor& x) const {
    Tensor out({side, side, 3}, 255.0f);
    for (std::size_t y = 0; y < inner; ++y) {
      const Tap ty = tap(y);
      for (std::size_t xx = 0; xx < inner; ++xx) {
        const Tap tx = tap(xx);
        for (std::size_t c = 0; c < 3; ++c) {
          auto at = [&](std::size_t r, std::size_t q) { return x[(r * side + q) * 3 + c]; };
          const float top = at(ty.i0, tx.i0) * (1 - tx.w1) + at(ty.i0, tx.i1) * tx.w1;
          const float bot = at(ty.i1, tx.i0) * (1 - tx.w1) + at(ty.i1, tx.i1) * tx.w1;
          out[((y + oy) * side + xx + ox) * 3 + c] = top * (1 - ty.w1) + bot * ty.w1;
        }
      }
    }
    return out;
  }

  Tensor adjoint(const Tensor& g) const {
    Tensor out({side, side, 3});
    for (std::size_t y = 0; y < inner; ++y) {
      const Tap ty = tap(y);
      for (std::size_t xx = 0; xx < inner; ++xx) {
        const Tap tx = tap(xx);
        for (std::size_t c = 0; c < 3; ++c) {
          const float v = g[((y + oy) * side + xx + ox) * 3 + c];
          auto add = [&](std::size_t r, std::size_t q, float wgt) { out[(r * side + q) * 3 + c] += v * wgt; };
          add(ty.i0, tx.i0, (1 - ty.w1) * (1 - tx.w1));
          add(ty.i0, tx.i1, (1 - ty.w1) * tx.w1);
          add(ty.i1, tx.i0, ty.w1 * (1 - tx.w1));
          add(ty.i1, tx.i1, ty.w1 * tx.w1);
        }
      }
    }
    return out;
  }
};

void accumulate(Tensor& sum, const Tensor& g) {
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += g[i];
}

void scale(Tensor& t, float s) {
  for (float& v : t.values()) v *= s;
}

}  // namespace

double attack_gradient(Objective& objective, const Tensor& x, const TechniqueConfig& technique, TechniqueState& state,
                       Tensor& gradient) {
  double loss = 0.0;
  switch (technique.kind) {
    case Technique::kNone:
      loss = objective.value_and_gradient(x, gradient);
      break;
    case Technique::kScale: {
      loss = objective.value_and_gradient(x, gradient);
      Tensor scaled = x, g;
      for (std::size_t i = 1; i <= technique.scales; ++i) {
        scale(scaled, 0.5f);
        objective.value_and_gradient(scaled, g);
        accumulate(gradient, g);
      }
      scale(gradient, 1.0f / static_cast<float>(technique.scales + 1));
      break;
    }
    case Technique::kDiverse: {
      const std::size_t side = x.dim(0);
      const auto inner = static_cast<std::size_t>(std::lround(technique.diverse_ratio * static_cast<float>(side)));
      std::uniform_int_distribution<std::size_t> offset(0, side - inner);
      std::uniform_real_distribution<float> coin(0.0f, 1.0f);
      gradient = Tensor(x.shape());
      Tensor g;
      for (std::size_t copy = 0; copy < technique.diverse_copies; ++copy) {
        const bool transform = coin(state.rng) < technique.diverse_prob;
        const std::size_t ox = offset(state.rng), oy = offset(state.rng);
        if (transform) {
          const DiverseTransform t{side, inner, ox, oy};
          loss += objective.value_and_gradient(t.apply(x), g);
          accumulate(gradient, t.adjoint(g));
        } else {
          loss += objective.value_and_gradient(x, g);
          accumulate(gradient, g);
        }
      }
      loss /= static_cast<double>(technique.diverse_copies);
      scale(gradient, 1.0f / static_cast<float>(technique.diverse_copies));
      break;
    }
    case Technique::kTranslate: {
      Tensor g;
      loss = objective.value_and_gradient(x, g);
      const float sigma = static_cast<float>(technique.kernel) / std::sqrt(3.0f);
      gradient = smooth(g, gaussian_kernel(technique.kernel, sigma));
      break;
    }
    case Technique::kMomentum: {
      Tensor g;
      loss = objective.value_and_gradient(x, g);
      double l1 = 0.0;
      for (float v : g.values()) l1 += std::abs(v);
      if (l1 > 0.0) scale(g, static_cast<float>(1.0 / l1));
      if (state.momentum) {
        Tensor m = *state.momentum;
        scale(m, technique.momentum);
        accumulate(m, g);
        g = std::move(m);
      }
      state.momentum = g;
      gradient = std::move(g);
      break;
    }
  }
  if (!gradient.all_finite()) throw NumericError("attack gradient is not finite");
  return loss;
}

Tensor rad_step(const Tensor& x, const Tensor& x0, const Tensor& g, float alpha, float epsilon) {
  if (x.shape() != x0.shape() || x.shape() != g.shape())
    throw ShapeError("rad_step shapes differ: " + to_string(x.shape()) + ", " + to_string(x0.shape()) + ", " +
                     to_string(g.shape()));
  double l1 = 0.0;
  for (float v : g.values()) l1 += std::abs(static_cast<double>(v));
  if (!(l1 > 0.0)) throw ZeroGradientError("attack gradient has zero l1 norm");
  const double mean_abs = l1 / static_cast<double>(g.size());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double proposed = static_cast<double>(x[i]) - static_cast<double>(alpha) * (static_cast<double>(g[i]) / mean_abs);
    const float lo = std::max(0.0f, x0[i] - epsilon), hi = std::min(255.0f, x0[i] + epsilon);
    out[i] = std::clamp(static_cast<float>(proposed), lo, hi);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attack loop

AttackResult run_attack(Method method, const toynet::Model& model, const Tensor& x0, const AttackConfig& config) {
  config.validate();
  const std::size_t s = model.head().input_side;
  if (x0.shape() != Shape{s, s, 3}) throw ShapeError("attack input must be " + to_string({s, s, 3}));

  AttackResult result{x0, {}};
  auto objective = make_objective(method, model, x0, config);
  TechniqueState state;
  state.rng.seed(config.seed);
  Tensor& x = result.image;
  result.trace.stop = "iterations";
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const auto pool = toynet::decode_all(model.head(), toynet::forward(model, x));
    TraceRow row;
    try {
      row.targets = objective->retarget(x, pool);
    } catch (const EmptyTargetError&) {
      result.trace.stop = "empty-target";
      break;
    }
    auto kept = pool;
    std::erase_if(kept, [](const Detection& d) { return d.confidence < toynet::kDefaultConfThresh; });
    row.detections = toynet::nms(std::move(kept), toynet::kDefaultNmsIou).size();

    Tensor g;
    row.loss = attack_gradient(*objective, x, config.technique, state, g);
    try {
      x = rad_step(x, x0, g, config.alpha, config.epsilon);
    } catch (const ZeroGradientError&) {
      result.trace.stop = "zero-gradient";
      result.trace.rows.push_back(row);
      break;
    }
    for (std::size_t i = 0; i < x.size(); ++i) row.linf = std::max(row.linf, std::abs(x[i] - x0[i]));
    result.trace.rows.push_back(row);
  }
  for (std::size_t i = 0; i < x.size(); ++i)
    if (std::abs(x[i] - x0[i]) > config.epsilon)
      throw BoundViolationError("pixel " + std::to_string(i) + " left the l-infinity ball");
  return result;
}

AttackResult run_rad(const toynet::Model& model, const Tensor& x0, const AttackConfig& config) {
  return run_attack(Method::kRad, model, x0, config);
}

AttackResult run_baseline(const toynet::Model& model, const Tensor& x0, Method which, const AttackConfig& config) {
  if (which == Method::kRad) throw UsageError("run_baseline needs dfool, loc, dag or pgd");
  return run_attack(which, model, x0, config);
}

}  // namespace rad::attack
