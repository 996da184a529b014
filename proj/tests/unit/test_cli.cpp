#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "rad/cli/cli.hpp"
#include "rad/corpus/corpus.hpp"
#include "rad/metrics/transfer.hpp"
#include "support/fixtures.hpp"
#include "support/temp_dir.hpp"

using namespace rad;
using rad::testing::read_bytes;
using rad::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome rad_run(std::vector<std::string> args) {
  args.insert(args.begin(), "rad");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Every regular file below `dir`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_bytes(e.path());
  return files;
}

std::string model_path() {
  rad::testing::trained_model(toynet::Arch::kA);
  return (rad::testing::fixture_dir() / "model_A_s1.bin").string();
}

}  // namespace

TEST_CASE("gen-data is byte-reproducible") {
  TempDir tmp("cli");
  const auto a = (tmp / "a").string(), b = (tmp / "b").string();
  REQUIRE(rad_run({"gen-data", "--seed", "5", "--count", "6", "--out", a}).code == cli::kExitOk);
  REQUIRE(rad_run({"gen-data", "--seed", "5", "--count", "6", "--out", b}).code == cli::kExitOk);
  const auto ta = tree(a);
  CHECK(ta.size() >= 7);
  CHECK(ta == tree(b));
  CHECK(corpus::load_dataset(a).size() == 6);
}

TEST_CASE("train is byte-reproducible and writes its resolved config") {
  TempDir tmp("cli");
  const auto data = (tmp / "data").string();
  REQUIRE(rad_run({"gen-data", "--seed", "3", "--count", "8", "--out", data}).code == 0);
  for (const char* dir : {"m1", "m2"})
    REQUIRE(rad_run({"train", "--arch", "B", "--data", data, "--out", (tmp / dir).string(), "--epochs", "1",
                     "--jobs", "1"})
                .code == 0);
  CHECK(tree(tmp / "m1") == tree(tmp / "m2"));
  const auto cfg = nlohmann::json::parse(read_bytes(tmp / "m1" / "config.json"));
  CHECK(cfg.at("epochs") == 1);
  CHECK(cfg.at("arch") == "B");
  CHECK_FALSE(cfg.contains("out"));
  CHECK_FALSE(cfg.contains("jobs"));
}

TEST_CASE("attack: eps 0 is the identity and config replay reproduces a run") {
  TempDir tmp("cli");
  const auto data = (tmp / "data").string(), model = model_path();
  REQUIRE(rad_run({"gen-data", "--seed", "12", "--count", "3", "--out", data}).code == 0);

  SUBCASE("eps 0") {
    const auto out = (tmp / "z").string();
    REQUIRE(rad_run({"attack", "--model", model, "--data", data, "--out", out, "--eps", "0", "--iters", "2"}).code ==
            0);
    const auto clean = corpus::load_dataset(data);
    const auto adv = corpus::load_dataset(out);
    REQUIRE(adv.size() == clean.size());
    for (std::size_t i = 0; i < adv.size(); ++i) CHECK(std::ranges::equal(adv[i].image.values(), clean[i].image.values()));
  }

  SUBCASE("replay") {
    const auto a1 = (tmp / "a1").string(), a2 = (tmp / "a2").string();
    REQUIRE(rad_run({"attack", "--model", model, "--data", data, "--out", a1, "--iters", "2", "--technique", "mi",
                     "--nodes", "dynamic:-2"})
                .code == 0);
    REQUIRE(rad_run({"attack", "--config", (fs::path(a1) / "config.json").string(), "--out", a2}).code == 0);
    CHECK(tree(a1) == tree(a2));

    // Explicit flags override the file.
    const auto a3 = (tmp / "a3").string();
    REQUIRE(rad_run({"attack", "--config", (fs::path(a1) / "config.json").string(), "--out", a3, "--iters", "1"})
                .code == 0);
    CHECK(nlohmann::json::parse(read_bytes(fs::path(a3) / "config.json")).at("iters") == 1);
  }
}

TEST_CASE("exit codes") {
  TempDir tmp("cli");
  const auto data = (tmp / "data").string();
  REQUIRE(rad_run({"gen-data", "--count", "1", "--out", data}).code == 0);

  const auto unknown = rad_run({"frob"});
  CHECK(unknown.code == cli::kExitUsage);
  CHECK(unknown.err.find("frob") != std::string::npos);
  CHECK(std::count(unknown.err.begin(), unknown.err.end(), '\n') == 1);

  CHECK(rad_run({}).code == cli::kExitUsage);
  CHECK(rad_run({"gen-data", "--out", data}).code == cli::kExitUsage);  // --count missing
  CHECK(rad_run({"attack", "--model", model_path(), "--data", data, "--out", (tmp / "x").string(), "--nodes",
                 "static:0"})
            .code == cli::kExitUsage);
  CHECK(rad_run({"attack", "--model", (tmp / "nope.bin").string(), "--data", data, "--out", (tmp / "y").string()})
            .code == cli::kExitIo);
  CHECK(rad_run({"eval", "--model", model_path(), "--data", (tmp / "missing").string()}).code == cli::kExitIo);
  CHECK(rad_run({"attack", "--config", (tmp / "missing.json").string()}).code == cli::kExitIo);

  std::ofstream(tmp / "extra.json") << R"({"count": 1, "bogus": 2})";
  CHECK(rad_run({"gen-data", "--config", (tmp / "extra.json").string(), "--out", (tmp / "g").string()}).code ==
        cli::kExitUsage);

  const auto help = rad_run({"attack", "--help"});
  CHECK(help.code == cli::kExitOk);
  CHECK(help.out.find("--technique") != std::string::npos);
}

TEST_CASE("transfer: clean-only single model, JSON round trip") {
  TempDir tmp("cli");
  const auto data = (tmp / "data").string(), model = model_path();
  REQUIRE(rad_run({"gen-data", "--seed", "12", "--count", "4", "--out", data}).code == 0);
  const auto res = rad_run({"transfer", "--models", model, "--datasets", data, "--out", (tmp / "t").string()});
  REQUIRE(res.code == 0);

  const auto j = nlohmann::json::parse(read_bytes(tmp / "t" / "transfer.json"));
  const auto m = metrics::TransferMatrix::from_json(j);
  CHECK(m.models.size() == 1);
  REQUIRE(m.rows.size() == 2);  // No Attack, Ablation
  CHECK(m.rows[0].label == "No Attack");
  CHECK(m.render() == read_bytes(tmp / "t" / "transfer.txt"));

  // The clean row equals a direct evaluation.
  const auto direct = metrics::evaluate_model(toynet::load_model(model), corpus::load_dataset(data));
  CHECK(m.rows[0].cells[0].map == doctest::Approx(direct.map).epsilon(1e-12));
}

TEST_CASE("relevance-dump writes a map") {
  TempDir tmp("cli");
  const auto data = (tmp / "data").string();
  REQUIRE(rad_run({"gen-data", "--seed", "12", "--count", "1", "--out", data}).code == 0);
  const auto image = (fs::path(data) / "images" / corpus::image_file_name(0)).string();
  REQUIRE(rad_run({"relevance-dump", "--model", model_path(), "--image", image, "--out", (tmp / "r").string()})
              .code == 0);
  const auto pgm = read_bytes(tmp / "r" / "relevance.pgm");
  CHECK(pgm.rfind("P5\n128 128\n255\n", 0) == 0);
  CHECK(pgm.size() == 15 + 128 * 128);
  CHECK(fs::exists(tmp / "r" / "relevance.json"));
}
