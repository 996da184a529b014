#include "rad/cli/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json_config.hpp"
#include "rad/attack/attack.hpp"
#include "rad/core/error.hpp"
#include "rad/core/parallel.hpp"
#include "rad/corpus/corpus.hpp"
#include "rad/metrics/transfer.hpp"
#include "rad/relevance/relevance.hpp"
#include "rad/toynet/train.hpp"
#include "rad/toynet/weights_io.hpp"

namespace rad::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->kind()) {
      case ErrorKind::kUsage:
      case ErrorKind::kShape: return kExitUsage;
      case ErrorKind::kIo: return kExitIo;
      case ErrorKind::kNumeric:
      case ErrorKind::kAttack: return kExitNumeric;
    }
  }
  if (dynamic_cast<const fs::filesystem_error*>(&e) || dynamic_cast<const std::ios_base::failure*>(&e))
    return kExitIo;
  if (dynamic_cast<const json::exception*>(&e)) return kExitIo;
  return 1;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

void write_config(const fs::path& dir, const json& config) { write_text(dir / "config.json", config.dump(2) + "\n"); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string format_record_row(const std::string& label, const metrics::EvalRecord& r, std::size_t label_width) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s %6.1f %6.1f %6.1f %6.1f %6.1f %6.1f %7.3f", static_cast<int>(label_width),
                label.c_str(), 100 * r.map, 100 * r.map50, 100 * r.map75, 100 * r.accuracy, 100 * r.mean_iou,
                100 * r.mar, r.rmse);
  return buf;
}

json record_json(const metrics::EvalRecord& r) {
  return {{"map", r.map},           {"map50", r.map50}, {"map75", r.map75}, {"accuracy", r.accuracy},
          {"mean_iou", r.mean_iou}, {"mar", r.mar},     {"rmse", r.rmse}};
}

std::string model_name(const fs::path& p) {
  const std::string stem = p.stem().string();
  if (stem == "model" && p.has_parent_path() && !p.parent_path().filename().empty())
    return p.parent_path().filename().string();
  return stem;
}

std::string attack_label(const json& attack_config) {
  std::string method = attack_config.value("method", std::string("attack"));
  for (char& c : method) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  std::string label = method;
  const std::string technique = attack_config.value("technique", std::string("none"));
  if (technique != "none") label += " " + technique;
  const std::string target = attack_config.value("target", std::string("class"));
  if (method == "RAD" && target != "class") label += " " + target;
  return label;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::uint64_t seed = 1;
  std::size_t count = 0;
  std::size_t classes = corpus::kShapeKinds;
  std::string out;
};

void gen_data(const GenDataArgs& a, std::size_t jobs, std::ostream& out) {
  const auto manifest = corpus::generate_corpus(a.seed, a.count, a.classes, a.out, jobs);
  write_config(a.out, {{"seed", a.seed}, {"count", a.count}, {"classes", a.classes}});
  out << "wrote " << manifest.entries.size() << " images to " << a.out << "\n";
}

struct TrainArgs {
  std::string arch = "A";
  std::string data;
  std::string out;
  toynet::TrainConfig config;
};

void train(const TrainArgs& a, std::size_t jobs, std::ostream& out) {
  const toynet::Arch arch = toynet::parse_arch(a.arch);
  a.config.validate();
  const auto manifest = corpus::load_manifest(a.data);
  const auto samples = corpus::load_dataset(a.data, jobs);
  ensure_dir(a.out);
  const auto initial = toynet::build_detector(arch, manifest.classes, a.config.seed);
  const auto result = toynet::train(initial, samples, a.config, [&](std::size_t epoch, double loss) {
    out << "epoch " << epoch + 1 << " loss " << loss << "\n" << std::flush;
  });
  toynet::save_model(fs::path(a.out) / "model.bin", result.model);
  write_text(fs::path(a.out) / "losses.json",
             json({{"epoch_losses", result.epoch_losses}, {"step_losses", result.step_losses}}).dump(2) + "\n");
  write_config(a.out, {{"arch", std::string(1, toynet::arch_char(arch))},
                       {"data", a.data},
                       {"epochs", a.config.epochs},
                       {"lr", a.config.learning_rate},
                       {"momentum", a.config.momentum},
                       {"batch", a.config.batch_size},
                       {"seed", a.config.seed}});
}

struct AttackArgs {
  std::string model;
  std::string data;
  std::string out;
  float eps = 16.0f;
  float alpha = 2.0f;
  std::size_t iters = 10;
  std::string nodes = "static:20";
  std::string target = "class";
  std::string technique = "si:4";
  std::string method = "rad";
  std::string reduction = "sum";
  std::uint64_t seed = 0;
  std::size_t limit = 0;
};

void attack_cmd(const AttackArgs& a, std::size_t jobs, std::ostream& out) {
  attack::AttackConfig cfg;
  cfg.epsilon = a.eps;
  cfg.alpha = a.alpha;
  cfg.iterations = a.iters;
  cfg.selection = attack::Selection::parse(a.nodes);
  cfg.kind = relevance::parse_target_kind(a.target);
  cfg.technique = attack::TechniqueConfig::parse(a.technique);
  cfg.reduction = attack::parse_reduction(a.reduction);
  cfg.seed = a.seed;
  cfg.validate();
  const attack::Method method = attack::parse_method(a.method);

  const toynet::Model model = toynet::load_model(a.model);
  const auto manifest = corpus::load_manifest(a.data);
  auto samples = corpus::load_dataset(a.data, jobs);
  if (a.limit > 0 && samples.size() > a.limit) samples.resize(a.limit);

  std::vector<Tensor> adversarial(samples.size());
  std::vector<attack::AttackTrace> traces(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    auto r = attack::run_attack(method, model, samples[i].image, cfg);
    adversarial[i] = std::move(r.image);
    traces[i] = std::move(r.trace);
  });

  json attack_json = cfg.to_json();
  attack_json["method"] = attack::method_name(method);
  corpus::AdversarialSetInfo info{cfg.epsilon, manifest.seed, manifest.classes,
                                  std::string(1, toynet::arch_char(model.arch())), attack_json};
  const auto emitted = corpus::emit_adversarial_set(samples, adversarial, info, a.out);

  json traces_json = json::array();
  for (const auto& t : traces) traces_json.push_back(t.to_json());
  write_text(fs::path(a.out) / "traces.json", traces_json.dump(1) + "\n");
  write_config(a.out, {{"model", a.model},
                       {"data", a.data},
                       {"eps", cfg.epsilon},
                       {"alpha", cfg.alpha},
                       {"iters", cfg.iterations},
                       {"nodes", cfg.selection.to_string()},
                       {"target", relevance::target_kind_name(cfg.kind)},
                       {"technique", cfg.technique.to_string()},
                       {"method", attack::method_name(method)},
                       {"reduction", attack::reduction_name(cfg.reduction)},
                       {"seed", cfg.seed},
                       {"limit", a.limit}});
  out << "attacked " << samples.size() << " images, mean rmse " << emitted.mean_rmse.value_or(0.0) << "\n";
}

struct EvalArgs {
  std::string model;
  std::string data;
  std::string clean_data;
  bool ablation = false;
  std::uint64_t ablation_seed = 0;
  std::string out;
};

void eval_cmd(const EvalArgs& a, std::size_t jobs, std::ostream& out) {
  const toynet::Model model = toynet::load_model(a.model);
  const auto manifest = corpus::load_manifest(a.data);
  const auto samples = corpus::load_dataset(a.data, jobs);

  std::vector<std::pair<std::string, metrics::EvalRecord>> rows;
  std::vector<corpus::Sample> clean;
  if (!a.clean_data.empty()) {
    clean = corpus::load_dataset(a.clean_data, jobs);
    rows.emplace_back("clean", metrics::evaluate_model(model, clean, jobs));
  }
  auto data_record = metrics::evaluate_model(model, samples, jobs);
  data_record.rmse = manifest.mean_rmse.value_or(0.0);
  if (!clean.empty() && clean.size() == samples.size() && !manifest.mean_rmse) {
    double s = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) s += metrics::rmse(samples[i].image, clean[i].image);
    data_record.rmse = s / static_cast<double>(samples.size());
  }
  rows.emplace_back(manifest.attack_config ? attack_label(*manifest.attack_config) : std::string("data"), data_record);
  if (a.ablation) {
    const auto set = metrics::ablation_set(clean.empty() ? samples : clean, a.ablation_seed);
    auto r = metrics::evaluate_model(model, set.samples, jobs);
    r.rmse = set.rmse;
    rows.emplace_back("ablation", r);
  }

  std::size_t width = 8;
  for (const auto& [label, r] : rows) width = std::max(width, label.size());
  char head[160];
  std::snprintf(head, sizeof head, "%-*s %6s %6s %6s %6s %6s %6s %7s", static_cast<int>(width), "set", "mAP",
                "mAP50", "mAP75", "acc", "mIoU", "mAR", "rmse");
  out << head << "\n";
  json report = json::object();
  for (const auto& [label, r] : rows) {
    out << format_record_row(label, r, width) << "\n";
    report[label] = record_json(r);
  }
  if (!a.out.empty()) {
    ensure_dir(a.out);
    write_text(fs::path(a.out) / "eval.json", report.dump(2) + "\n");
    write_config(a.out, {{"model", a.model},
                         {"data", a.data},
                         {"clean-data", a.clean_data},
                         {"ablation", a.ablation},
                         {"ablation-seed", a.ablation_seed}});
  }
}

struct TransferArgs {
  std::vector<std::string> models;
  std::vector<std::string> datasets;
  std::uint64_t ablation_seed = 0;
  std::string out;
};

void transfer_cmd(const TransferArgs& a, std::size_t jobs, std::ostream& out) {
  std::vector<metrics::NamedModel> models;
  for (const auto& p : a.models) models.push_back({model_name(p), toynet::load_model(p)});

  std::vector<corpus::Sample> clean;
  bool have_clean = false;
  std::vector<metrics::LabeledSet> attacked;
  for (const auto& d : a.datasets) {
    const auto manifest = corpus::load_manifest(d);
    auto samples = corpus::load_dataset(d, jobs);
    if (!manifest.surrogate_arch) {
      if (have_clean) throw UsageError("transfer takes at most one clean dataset, got a second: " + d);
      clean = std::move(samples);
      have_clean = true;
      continue;
    }
    const json cfg = manifest.attack_config.value_or(json::object());
    attacked.push_back({attack_label(cfg), *manifest.surrogate_arch, std::move(samples), manifest.mean_rmse.value_or(0)});
    if (!have_clean && attacked.size() == 1) {
      // Without an explicit clean set, the first attacked set's sources serve.
      const auto sources = corpus::load_sources(d, jobs);
      clean = attacked.back().samples;
      for (std::size_t i = 0; i < clean.size(); ++i) clean[i].image = sources[i];
    }
  }
  const auto matrix = metrics::transfer_matrix(models, clean, attacked, a.ablation_seed, jobs);
  const std::string table = matrix.render();
  out << table;
  if (!a.out.empty()) {
    ensure_dir(a.out);
    write_text(fs::path(a.out) / "transfer.txt", table);
    write_text(fs::path(a.out) / "transfer.json", matrix.to_json().dump(2) + "\n");
    write_config(a.out, {{"models", a.models}, {"datasets", a.datasets}, {"ablation-seed", a.ablation_seed}});
  }
}

struct RelevanceArgs {
  std::string model;
  std::string image;
  std::string nodes = "static:20";
  std::string target = "class";
  std::string out;
};

void relevance_cmd(const RelevanceArgs& a, std::ostream& out) {
  const auto selection = attack::Selection::parse(a.nodes);
  const auto kind = relevance::parse_target_kind(a.target);
  const toynet::Model model = toynet::load_model(a.model);
  const Tensor image = corpus::read_ppm(a.image);
  const auto pool = toynet::decode_all(model.head(), toynet::forward(model, image));
  const auto targets = attack::select_nodes(pool, selection, kind);
  const Tensor map = relevance::relevance_map(model, image, targets);

  ensure_dir(a.out);
  corpus::write_pgm(fs::path(a.out) / "relevance.pgm", relevance::to_gray(map));
  double sum = 0.0;
  float lo = map.size() ? map[0] : 0.0f, hi = lo;
  for (float v : map.values()) {
    sum += v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  json nodes = json::array();
  for (const auto& n : targets.nodes) nodes.push_back({{"box", n.box_index}, {"field", n.field}});
  write_text(fs::path(a.out) / "relevance.json",
             json({{"sum", sum}, {"min", lo}, {"max", hi}, {"targets", nodes}}).dump(2) + "\n");
  write_config(a.out, {{"model", a.model}, {"image", a.image}, {"nodes", selection.to_string()}, {"target", a.target}});
  out << "relevance map over " << targets.size() << " target nodes, sum " << sum << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Relevance attack on toy object detectors", "rad"};
  app.require_subcommand(1);
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_version_flag("--version", "rad 1.0");

  std::size_t jobs = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->fallthrough();
    sub->add_option("--jobs", jobs, "Worker threads (default: RAD_JOBS or all cores)")->check(CLI::PositiveNumber);
  };

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic shapes corpus");
  gen_cmd->add_option("--seed", gen.seed, "Corpus seed")->capture_default_str();
  gen_cmd->add_option("--count", gen.count, "Number of images")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--classes", gen.classes, "Shape classes (1-4)")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  add_common(gen_cmd);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a toy detector");
  train_cmd->add_option("--arch", tr.arch, "Architecture A or B")->capture_default_str();
  train_cmd->add_option("--data", tr.data, "Training corpus directory")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--epochs", tr.config.epochs, "Epochs")->capture_default_str();
  train_cmd->add_option("--lr", tr.config.learning_rate, "Learning rate")->capture_default_str();
  train_cmd->add_option("--momentum", tr.config.momentum, "SGD momentum")->capture_default_str();
  train_cmd->add_option("--batch", tr.config.batch_size, "Batch size")->capture_default_str();
  train_cmd->add_option("--seed", tr.config.seed, "Initialisation and shuffle seed")->capture_default_str();
  add_common(train_cmd);

  AttackArgs at;
  auto* attack_sub = app.add_subcommand("attack", "Attack a dataset and emit an adversarial set");
  attack_sub->add_option("--model", at.model, "Surrogate weights file")->required();
  attack_sub->add_option("--data", at.data, "Clean corpus directory")->required();
  attack_sub->add_option("--out", at.out, "Output directory")->required();
  attack_sub->add_option("--eps", at.eps, "l-infinity budget in pixel units")->capture_default_str();
  attack_sub->add_option("--alpha", at.alpha, "Step length in pixel units")->capture_default_str();
  attack_sub->add_option("--iters", at.iters, "Iterations")->capture_default_str();
  attack_sub->add_option("--nodes", at.nodes, "static:K or dynamic:TAU")->capture_default_str();
  attack_sub->add_option("--target", at.target, "class, size or loc")->capture_default_str();
  attack_sub->add_option("--technique", at.technique, "none, si[:K], di, ti[:K] or mi")->capture_default_str();
  attack_sub->add_option("--method", at.method, "rad, dfool, loc, dag or pgd")->capture_default_str();
  attack_sub->add_option("--reduction", at.reduction, "sum, positive or l2")->capture_default_str();
  attack_sub->add_option("--seed", at.seed, "Seed for randomised techniques")->capture_default_str();
  attack_sub->add_option("--limit", at.limit, "Attack only the first N images (0 = all)")->capture_default_str();
  add_common(attack_sub);

  EvalArgs ev;
  auto* eval_sub = app.add_subcommand("eval", "Evaluate a model on a dataset");
  eval_sub->add_option("--model", ev.model, "Weights file")->required();
  eval_sub->add_option("--data", ev.data, "Dataset directory")->required();
  eval_sub->add_option("--clean-data", ev.clean_data, "Clean counterpart of --data");
  eval_sub->add_flag("--ablation", ev.ablation, "Add a Gaussian noise (sigma 9) row");
  eval_sub->add_option("--ablation-seed", ev.ablation_seed, "Noise seed")->capture_default_str();
  eval_sub->add_option("--out", ev.out, "Directory for eval.json");
  add_common(eval_sub);

  TransferArgs tf;
  auto* transfer_sub = app.add_subcommand("transfer", "Transfer matrix of datasets against models");
  transfer_sub->add_option("--models", tf.models, "Victim weights files")->required();
  transfer_sub->add_option("--datasets", tf.datasets, "Clean and adversarial dataset directories")->required();
  transfer_sub->add_option("--ablation-seed", tf.ablation_seed, "Noise seed")->capture_default_str();
  transfer_sub->add_option("--out", tf.out, "Directory for transfer.txt and transfer.json");
  add_common(transfer_sub);

  RelevanceArgs rv;
  auto* relevance_sub = app.add_subcommand("relevance-dump", "Write a relevance map as PGM");
  relevance_sub->add_option("--model", rv.model, "Weights file")->required();
  relevance_sub->add_option("--image", rv.image, "Input PPM image")->required();
  relevance_sub->add_option("--nodes", rv.nodes, "static:K or dynamic:TAU")->capture_default_str();
  relevance_sub->add_option("--target", rv.target, "class, size or loc")->capture_default_str();
  relevance_sub->add_option("--out", rv.out, "Output directory")->required();
  add_common(relevance_sub);

  if (argc > 1 && argv[1][0] != '-') {
    const std::string name = argv[1];
    bool known = false;
    for (const CLI::App* sub : app.get_subcommands({})) known = known || sub->get_name() == name;
    if (!known) {
      err << "rad: error: unknown subcommand '" << name
          << "' (expected gen-data, train, attack, eval, transfer or relevance-dump)\n";
      return kExitUsage;
    }
    // `rad <cmd> --config f.json`: the file's keys belong to <cmd>.
    app.config_formatter(std::make_shared<JsonConfig>(name));
    app.set_config("--config", "", "JSON file of flag values for the subcommand (explicit flags win)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << "rad 1.0\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    if (const auto nl = msg.find('\n'); nl != std::string::npos) msg.resize(nl);
    err << "rad: error: " << msg << "\n";
    return dynamic_cast<const CLI::FileError*>(&e) ? kExitIo : kExitUsage;
  }

  try {
    if (jobs == 0) jobs = default_jobs();
    if (*gen_cmd) gen_data(gen, jobs, out);
    else if (*train_cmd) train(tr, jobs, out);
    else if (*attack_sub) attack_cmd(at, jobs, out);
    else if (*eval_sub) eval_cmd(ev, jobs, out);
    else if (*transfer_sub) transfer_cmd(tf, jobs, out);
    else if (*relevance_sub) relevance_cmd(rv, out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    if (const auto nl = msg.find('\n'); nl != std::string::npos) msg.resize(nl);
    err << "rad: error: " << msg << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}

}  // namespace rad::cli
