#pragma once

// Relevance attack (RAD) and prediction-space baselines.
//
// All methods share one loop: forward pass, target selection, gradient of a
// method-specific loss (optionally through a transfer technique), then an
// l1-normalised step clipped to the l-infinity ball and the pixel range.

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rad/relevance/relevance.hpp"
#include "rad/toynet/detect.hpp"

namespace rad::attack {

using relevance::TargetKind;
using relevance::TargetSet;

struct Selection {
  enum class Mode { kStatic, kDynamic } mode = Mode::kStatic;
  std::size_t k = 20;   // static
  float tau = -2.0f;    // dynamic: logit(confidence) > tau

  // "static:20" or "dynamic:-2". Errors: k == 0, malformed text.
  static Selection parse(const std::string& text);
  std::string to_string() const;
};

enum class Technique { kNone, kScale, kDiverse, kTranslate, kMomentum };

struct TechniqueConfig {
  Technique kind = Technique::kScale;
  std::size_t scales = 4;        // SI: copies x / 2^i, i = 0..scales
  float diverse_prob = 1.0f;     // DI: chance each copy is transformed
  std::size_t diverse_copies = 4;
  float diverse_ratio = 0.9f;    // DI: resize factor before white padding
  std::size_t kernel = 15;       // TI: Gaussian size (odd)
  float momentum = 1.0f;         // MI: mu

  // none | si | si:K | di | ti | ti:K | mi
  static TechniqueConfig parse(const std::string& text);
  std::string to_string() const;
};

// Scalar reduction of the relevance map fed to the gradient.
enum class Reduction { kSignedSum, kPositiveSum, kSquaredSum };
Reduction parse_reduction(const std::string& text);  // sum | positive | l2
const char* reduction_name(Reduction r);

enum class Method { kRad, kDfool, kLoc, kDag, kPgd };
Method parse_method(const std::string& text);
const char* method_name(Method m);

struct AttackConfig {
  float epsilon = 16.0f;
  float alpha = 2.0f;
  std::size_t iterations = 10;
  Selection selection;
  TargetKind kind = TargetKind::kClassification;
  TechniqueConfig technique;
  Reduction reduction = Reduction::kSignedSum;
  std::uint64_t seed = 0;

  // Errors: eps < 0, alpha <= 0, iterations == 0, bad technique parameters.
  void validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

struct TraceRow {
  double loss = 0.0;            // at the iterate the step starts from
  std::size_t targets = 0;      // |T| at that iterate
  std::size_t detections = 0;   // post-NMS detections at conf 0.25, same iterate
  float linf = 0.0f;            // max |x_{k+1} - x_0| after the step
};

struct AttackTrace {
  std::vector<TraceRow> rows;
  std::string stop;  // "iterations", "empty-target" or "zero-gradient"
  nlohmann::json to_json() const;
};

struct AttackResult {
  Tensor image;  // H x W x 3 floats in [0, 255]
  AttackTrace trace;
};

// Boxes with confidence >= 0.05 from a pre-NMS pool, confidence descending.
std::vector<toynet::Detection> candidate_pool(std::span<const toynet::Detection> all);

// Static: the k most confident candidates (ties by box index). Dynamic: every
// box of the full pool whose score exceeds tau. Errors: EmptyTargetError.
TargetSet select_nodes(std::span<const toynet::Detection> pool, const Selection& selection, TargetKind kind);

// ---------------------------------------------------------------------------
// Objectives

// A loss to minimise over the image, re-targeted from a fresh forward pass.
class Objective {
 public:
  virtual ~Objective() = default;
  // Chooses targets for iterate x. Returns |T|. Errors: EmptyTargetError.
  virtual std::size_t retarget(const Tensor& x_hwc, std::span<const toynet::Detection> pool) = 0;
  // Loss at x_hwc for the current targets and its gradient (H x W x 3).
  virtual double value_and_gradient(const Tensor& x_hwc, Tensor& gradient) = 0;
};

// RAD: reduction of the relevance map h(x, T).
class RadObjective final : public Objective {
 public:
  RadObjective(const toynet::Model& model, const AttackConfig& config);
  std::size_t retarget(const Tensor& x_hwc, std::span<const toynet::Detection> pool) override;
  double value_and_gradient(const Tensor& x_hwc, Tensor& gradient) override;
  const TargetSet& targets() const noexcept { return targets_; }
  const relevance::RelevanceGraph& graph() const noexcept { return graph_; }
  NodeId loss_node() const noexcept { return loss_; }

 private:
  relevance::RelevanceGraph graph_;
  Selection selection_;
  NodeId loss_;
  TargetSet targets_;
  std::vector<toynet::Detection> pool_;
};

std::unique_ptr<Objective> make_objective(Method method, const toynet::Model& model, const Tensor& x0,
                                          const AttackConfig& config);

// rad_loss as a graph node: the configured reduction of h(x, T).
NodeId rad_loss(const relevance::RelevanceGraph& graph, Reduction reduction);

// ---------------------------------------------------------------------------
// Gradient techniques and the update rule

struct TechniqueState {
  std::optional<Tensor> momentum;  // MI accumulator
  std::mt19937_64 rng{0};          // DI offsets
};

// Technique-transformed gradient at x. Returns the loss at x itself (first
// term of SI/DI). Errors: non-finite gradient (NumericError).
double attack_gradient(Objective& objective, const Tensor& x_hwc, const TechniqueConfig& technique,
                       TechniqueState& state, Tensor& gradient);

// 2-D Gaussian, normalised to sum 1; size must be odd.
Tensor gaussian_kernel(std::size_t size, float sigma);
// Per-channel "same" convolution of an H x W x C field with zero padding.
Tensor smooth(const Tensor& field_hwc, const Tensor& kernel);

// x' = clip(x - alpha * g / (|g|_1 / N)). Errors: ZeroGradientError.
Tensor rad_step(const Tensor& x, const Tensor& x0, const Tensor& g, float alpha, float epsilon);

AttackResult run_attack(Method method, const toynet::Model& model, const Tensor& x0, const AttackConfig& config);
AttackResult run_rad(const toynet::Model& model, const Tensor& x0, const AttackConfig& config);
AttackResult run_baseline(const toynet::Model& model, const Tensor& x0, Method which, const AttackConfig& config);

}  // namespace rad::attack
