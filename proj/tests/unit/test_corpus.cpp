#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "rad/core/error.hpp"
#include "rad/corpus/corpus.hpp"
#include "rad/metrics/metrics.hpp"
#include "support/temp_dir.hpp"

using namespace rad;
using namespace rad::corpus;
using rad::testing::read_bytes;
using rad::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::vector<std::pair<std::string, std::string>> tree_bytes(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.emplace_back(fs::relative(e.path(), root).string(), read_bytes(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

void rewrite_manifest(const fs::path& dir, const std::function<void(nlohmann::json&)>& edit) {
  nlohmann::json j;
  std::ifstream(dir / "manifest.json") >> j;
  edit(j);
  std::ofstream(dir / "manifest.json") << j.dump();
}

}  // namespace

TEST_CASE("generate_corpus is byte-deterministic") {
  TempDir a("corpus-a"), b("corpus-b");
  generate_corpus(1, 10, 4, a.path());
  generate_corpus(1, 10, 4, b.path(), 3);
  const auto ta = tree_bytes(a.path());
  CHECK(ta.size() == 11);
  CHECK(ta == tree_bytes(b.path()));

  TempDir c("corpus-c");
  generate_corpus(2, 10, 4, c.path());
  CHECK(ta != tree_bytes(c.path()));
}

TEST_CASE("generated samples respect the sample invariants") {
  std::array<std::size_t, kShapeKinds> histogram{};
  std::size_t objects = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    const Sample s = generate_sample(9, i, 4);
    REQUIRE(s.image.shape() == Shape{kImageSide, kImageSide, 3});
    CHECK(!s.annotations.empty());
    CHECK(s.annotations.size() <= 6);
    for (const auto& a : s.annotations) {
      CHECK(a.box.x >= 0);
      CHECK(a.box.y >= 0);
      CHECK(a.box.w > 0);
      CHECK(a.box.right() <= kImageSide);
      CHECK(a.box.bottom() <= kImageSide);
      ++histogram.at(a.class_id);
      ++objects;
    }
    if (i < 20)
      CHECK(std::all_of(s.image.values().begin(), s.image.values().end(),
                        [](float v) { return v >= 0 && v <= 255 && v == std::round(v); }));
  }
  for (std::size_t c = 0; c < kShapeKinds; ++c) {
    const double f = static_cast<double>(histogram[c]) / objects;
    INFO(shape_name(c) << " frequency " << f);
    CHECK(f >= 0.15);
    CHECK(f <= 0.35);
  }
}

TEST_CASE("generate_sample validates the class count") {
  CHECK_THROWS_AS(generate_sample(1, 0, 0), UsageError);
  CHECK_THROWS_AS(generate_sample(1, 0, 5), UsageError);
  for (std::size_t i = 0; i < 50; ++i)
    for (const auto& a : generate_sample(1, i, 2).annotations) CHECK(a.class_id < 2);
  TempDir d;
  CHECK_THROWS_AS(generate_corpus(1, 0, 4, d.path()), UsageError);
}

TEST_CASE("load_dataset round-trips generated images and annotations") {
  TempDir d;
  const DatasetManifest m = generate_corpus(4, 6, 4, d.path());
  const auto samples = load_dataset(d.path());
  REQUIRE(samples.size() == 6);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample expected = generate_sample(4, i, 4);
    CHECK(samples[i].image.identical(expected.image));
    CHECK(samples[i].annotations == expected.annotations);
    CHECK(m.entries[i].image_file == "images/" + image_file_name(i));
  }
  CHECK(load_manifest(d.path()).to_json() == m.to_json());
}

TEST_CASE("load_dataset error paths") {
  SUBCASE("truncated image") {
    TempDir d;
    generate_corpus(4, 2, 4, d.path());
    const fs::path img = d / "images/000001.ppm";
    const std::string bytes = read_bytes(img);
    std::ofstream(img, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_dataset(d.path()), CorruptDataError);
  }
  SUBCASE("bad header") {
    TempDir d;
    generate_corpus(4, 1, 4, d.path());
    std::ofstream(d / "images/000000.ppm", std::ios::binary) << "P3\n1 1\n255\n0 0 0\n";
    CHECK_THROWS_AS(load_dataset(d.path()), CorruptDataError);
  }
  SUBCASE("missing file is named") {
    TempDir d;
    generate_corpus(4, 2, 4, d.path());
    fs::remove(d / "images/000001.ppm");
    try {
      load_dataset(d.path());
      FAIL("expected MissingFileError");
    } catch (const MissingFileError& e) {
      CHECK(e.path().find("000001.ppm") != std::string::npos);
      CHECK(std::string(e.what()).find("000001.ppm") != std::string::npos);
    }
  }
  SUBCASE("missing manifest") {
    TempDir d;
    CHECK_THROWS_AS(load_dataset(d.path()), MissingFileError);
  }
  SUBCASE("annotation out of bounds") {
    TempDir d;
    generate_corpus(4, 1, 4, d.path());
    rewrite_manifest(d.path(), [](nlohmann::json& j) { j["samples"][0]["annotations"][0]["box"] = {120, 120, 20, 20}; });
    CHECK_THROWS_AS(load_dataset(d.path()), CorruptDataError);
  }
}

TEST_CASE("PPM round trip and quantize") {
  TempDir d;
  Tensor img({3, 2, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i * 13 % 256);
  write_ppm(d / "x.ppm", img);
  CHECK(read_ppm(d / "x.ppm").identical(img));
  CHECK(read_bytes(d / "x.ppm").substr(0, 11) == "P6\n2 3\n255\n");
  CHECK_THROWS_AS(write_ppm(d / "y.ppm", Tensor({2, 2, 3}, 0.5f)), UsageError);

  const Tensor q = quantize(Tensor::vector({-3.0f, 0.4f, 0.6f, 254.5f, 300.0f}));
  CHECK(std::vector<float>(q.data(), q.data() + q.size()) == std::vector<float>{0, 0, 1, 255, 255});
}

TEST_CASE("emit_adversarial_set bookkeeping") {
  TempDir src;
  generate_corpus(5, 3, 4, src.path());
  const auto originals = load_dataset(src.path());
  AdversarialSetInfo info;
  info.epsilon = 16;
  info.surrogate_arch = "A";
  info.attack_config = {{"method", "test"}};

  SUBCASE("identity gives zero rmse") {
    TempDir out;
    std::vector<Tensor> adv;
    for (const auto& s : originals) adv.push_back(s.image);
    const auto m = emit_adversarial_set(originals, adv, info, out.path());
    for (const auto& e : m.entries) CHECK(*e.rmse == 0.0);
    CHECK(*m.mean_rmse == 0.0);
  }
  SUBCASE("uniform offset of 4") {
    TempDir out;
    std::vector<Tensor> adv;
    std::vector<Sample> clipped = originals;
    for (auto& s : clipped) {
      for (float& v : s.image.values()) v = std::min(v, 251.0f);
      Tensor a = s.image;
      for (float& v : a.values()) v += 4.0f;
      adv.push_back(a);
    }
    const auto m = emit_adversarial_set(clipped, adv, info, out.path());
    for (const auto& e : m.entries) CHECK(*e.rmse == 4.0);
    CHECK(*m.mean_rmse == 4.0);
  }
  SUBCASE("stored pairs reproduce the recorded rmse") {
    TempDir out;
    std::vector<Tensor> adv;
    std::mt19937 rng(1);
    std::uniform_real_distribution<float> d(-16.0f, 16.0f);
    for (const auto& s : originals) {
      Tensor a = s.image;
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::clamp(s.image[i] + d(rng), 0.0f, 255.0f);
      adv.push_back(a);
    }
    const auto m = emit_adversarial_set(originals, adv, info, out.path());
    const auto loaded = load_manifest(out.path());
    CHECK(loaded.to_json() == m.to_json());
    const auto advs = load_dataset(out.path());
    const auto sources = load_sources(out.path());
    double total = 0.0;
    for (std::size_t i = 0; i < advs.size(); ++i) {
      const double r = metrics::rmse(sources[i], advs[i].image);
      CHECK(std::abs(r - *loaded.entries[i].rmse) <= 1e-3);
      CHECK(advs[i].annotations == originals[i].annotations);
      float worst = 0.0f;
      for (std::size_t k = 0; k < sources[i].size(); ++k) worst = std::max(worst, std::abs(advs[i].image[k] - sources[i][k]));
      CHECK(worst <= 16.5f);
      total += r;
    }
    CHECK(*loaded.mean_rmse > 0.0);
    CHECK(*loaded.mean_rmse <= 16.0);
    CHECK(std::abs(total / advs.size() - *loaded.mean_rmse) <= 1e-3);
    CHECK(*loaded.surrogate_arch == "A");
  }
  SUBCASE("bound violation and shape mismatch") {
    TempDir out;
    std::vector<Tensor> adv;
    for (const auto& s : originals) adv.push_back(s.image);
    adv[1][0] = adv[1][0] < 128 ? adv[1][0] + 17 : adv[1][0] - 17;
    CHECK_THROWS_AS(emit_adversarial_set(originals, adv, info, out.path()), BoundViolationError);
    adv[1] = Tensor({4, 4, 3});
    CHECK_THROWS_AS(emit_adversarial_set(originals, adv, info, out.path()), ShapeError);
    adv.pop_back();
    CHECK_THROWS_AS(emit_adversarial_set(originals, adv, info, out.path()), ShapeError);
  }
}
