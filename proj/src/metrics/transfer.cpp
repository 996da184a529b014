#include "rad/metrics/transfer.hpp"

#include <algorithm>
#include <cstdio>
#include <random>
#include <sstream>

#include "rad/core/error.hpp"
#include "rad/core/parallel.hpp"
#include "rad/toynet/detect.hpp"

namespace rad::metrics {

using nlohmann::json;

std::vector<ImagePredictions> predict(const toynet::Model& model, const std::vector<corpus::Sample>& samples,
                                      std::size_t jobs) {
  std::vector<ImagePredictions> out(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    for (const auto& d : toynet::detect(model, samples[i].image, kEvalConfThresh, toynet::kDefaultNmsIou))
      out[i].push_back({d.box, d.class_id, d.confidence});
  });
  return out;
}

std::vector<ImageTruths> truths(const std::vector<corpus::Sample>& samples) {
  std::vector<ImageTruths> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (const auto& a : samples[i].annotations) out[i].push_back({a.box, a.class_id});
  return out;
}

EvalRecord evaluate_model(const toynet::Model& model, const std::vector<corpus::Sample>& samples, std::size_t jobs) {
  return evaluate(predict(model, samples, jobs), truths(samples));
}

Tensor ablation_image(const Tensor& clean, std::uint64_t seed, std::size_t index, float sigma) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<float> noise(0.0f, sigma);
  Tensor out = clean;
  for (float& v : out.values()) v = std::clamp(v + noise(rng), 0.0f, 255.0f);
  return corpus::quantize(out);
}

LabeledSet ablation_set(const std::vector<corpus::Sample>& clean, std::uint64_t seed, float sigma) {
  LabeledSet set{"Ablation", "", clean, 0.0};
  double sq = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    set.samples[i].image = ablation_image(clean[i].image, seed, i, sigma);
    sq += rmse(set.samples[i].image, clean[i].image);
  }
  set.rmse = clean.empty() ? 0.0 : sq / static_cast<double>(clean.size());
  return set;
}

TransferMatrix transfer_matrix(const std::vector<NamedModel>& models, const std::vector<corpus::Sample>& clean,
                               const std::vector<LabeledSet>& attacked, std::uint64_t ablation_seed,
                               std::size_t jobs) {
  if (models.empty()) throw UsageError("transfer matrix needs at least one model");
  TransferMatrix m;
  for (const auto& nm : models) m.models.push_back(nm.name);
  auto add_row = [&](const LabeledSet& set) {
    TransferRow row{set.label, set.surrogate, {}};
    for (const auto& nm : models) {
      EvalRecord r = evaluate_model(nm.model, set.samples, jobs);
      r.rmse = set.rmse;
      row.cells.push_back(r);
    }
    m.rows.push_back(std::move(row));
  };
  add_row(LabeledSet{"No Attack", "", clean, 0.0});
  add_row(ablation_set(clean, ablation_seed));
  for (const auto& set : attacked) add_row(set);
  return m;
}

std::string TransferMatrix::render() const {
  std::vector<std::string> head{"Attack"};
  head.insert(head.end(), models.begin(), models.end());
  std::vector<std::vector<std::string>> lines{head};
  for (const auto& r : rows) {
    std::vector<std::string> line{r.surrogate.empty() ? r.label : r.label + " (" + r.surrogate + ")"};
    for (const auto& c : r.cells) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.1f", 100.0 * c.map);
      line.emplace_back(buf);
    }
    lines.push_back(std::move(line));
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& line : lines)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::size_t total = 2 * (width.size() - 1);
  for (auto w : width) total += w;

  std::ostringstream out;
  for (std::size_t l = 0; l < lines.size(); ++l) {
    const auto& line = lines[l];
    out << line[0] << std::string(width[0] - line[0].size(), ' ');
    for (std::size_t i = 1; i < line.size(); ++i) out << "  " << std::string(width[i] - line[i].size(), ' ') << line[i];
    out << '\n';
    if (l == 0) out << std::string(total, '-') << '\n';
  }
  return out.str();
}

namespace {

json record_json(const EvalRecord& r) {
  return {{"map", r.map},           {"map50", r.map50}, {"map75", r.map75}, {"accuracy", r.accuracy},
          {"mean_iou", r.mean_iou}, {"mar", r.mar},     {"rmse", r.rmse}};
}

EvalRecord record_from(const json& j) {
  EvalRecord r;
  r.map = j.at("map").get<double>();
  r.map50 = j.at("map50").get<double>();
  r.map75 = j.at("map75").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.mean_iou = j.at("mean_iou").get<double>();
  r.mar = j.at("mar").get<double>();
  r.rmse = j.at("rmse").get<double>();
  return r;
}

}  // namespace

json TransferMatrix::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    json cells = json::array();
    for (const auto& c : r.cells) cells.push_back(record_json(c));
    rows_json.push_back({{"label", r.label}, {"surrogate", r.surrogate}, {"cells", cells}});
  }
  return {{"models", models}, {"rows", rows_json}};
}

TransferMatrix TransferMatrix::from_json(const json& j) {
  TransferMatrix m;
  try {
    m.models = j.at("models").get<std::vector<std::string>>();
    for (const auto& r : j.at("rows")) {
      TransferRow row{r.at("label").get<std::string>(), r.at("surrogate").get<std::string>(), {}};
      for (const auto& c : r.at("cells")) row.cells.push_back(record_from(c));
      if (row.cells.size() != m.models.size()) throw CorruptDataError("transfer row width differs from model count");
      m.rows.push_back(std::move(row));
    }
  } catch (const json::exception& e) {
    throw CorruptDataError(std::string("transfer report: ") + e.what());
  }
  return m;
}

}  // namespace rad::metrics
