#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "rad/corpus/corpus.hpp"
#include "rad/toynet/model.hpp"

namespace rad::toynet {

struct TrainConfig {
  std::size_t epochs = 30;
  float learning_rate = 0.01f;
  float momentum = 0.9f;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;

  // Errors: zero epochs or batch size, negative rate, momentum outside [0, 1).
  void validate() const;
};

struct TrainResult {
  Model model;
  std::vector<double> epoch_losses;  // mean per-image loss seen during each epoch
  std::vector<double> step_losses;   // mean batch loss before each update
};

// Loss term weights. Summed per-image terms are large enough to kill ReLUs at
// lr 0.01 with momentum 0.9, hence the 0.1 scale on the dense terms; box
// regression carries the most weight because localisation dominates mAP@.5:.95.
inline constexpr float kObjectnessWeight = 0.1f;
inline constexpr float kClassWeight = 0.1f;
inline constexpr float kBoxWeight = 1.0f;

// Per-image training loss: objectness BCE over all anchors, class
// cross-entropy and squared box-offset error over assigned anchors. Weights
// are leaves (see bind_weights); targets are leaves filled by bind_targets.
struct LossGraph {
  std::shared_ptr<const Graph> graph;
  NodeId loss;
  std::vector<NodeId> parameters;  // w0, b0, w1, b1, ...
};

LossGraph build_loss_graph(const Model& model);

// Anchor assignment: each annotation goes to the cell holding its centre and
// the anchor with the best shape IoU. Later annotations win collisions.
std::size_t assign_anchor(const HeadLayout& head, const Box& box);

// Binds image and target leaves for one sample.
void bind_sample(const HeadLayout& head, const corpus::Sample& sample, Bindings& bindings);

using ProgressFn = std::function<void(std::size_t epoch, double loss)>;

// Minibatch SGD with momentum. Deterministic for fixed seed. Errors: empty
// corpus, invalid config, non-finite loss (NumericError naming the epoch).
TrainResult train(Model model, const std::vector<corpus::Sample>& corpus, const TrainConfig& config,
                  const ProgressFn& progress = {});

}  // namespace rad::toynet
