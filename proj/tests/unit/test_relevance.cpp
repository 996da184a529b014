#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "rad/core/error.hpp"
#include "rad/core/finite_diff.hpp"
#include "rad/relevance/relevance.hpp"
#include "support/fixtures.hpp"
#include "support/random.hpp"

using namespace rad;
using namespace rad::relevance;
using rad::testing::random_tensor;

namespace {

Tensor vec(std::initializer_list<float> v) {
  Tensor t({v.size()});
  std::copy(v.begin(), v.end(), t.values().begin());
  return t;
}

Tensor random_simplex(std::mt19937& rng, std::size_t n) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(n);
  for (double& x : v) x = e(rng);
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  Tensor t({n});
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<float>(v[i] / s);
  return t;
}

double tensor_sum(const Tensor& t) {
  double s = 0.0;
  for (float v : t.values()) s += v;
  return s;
}

Tensor noise_image(std::uint32_t seed, std::size_t side = 128) {
  std::mt19937 rng(seed);
  return random_tensor(rng, {side, side, 3}, 0.0f, 255.0f);
}

TargetSet class_targets(const std::vector<toynet::Detection>& dets) {
  TargetSet t;
  for (const auto& d : dets)
    for (const auto& n : nodes_for(d, TargetKind::kClassification)) t.nodes.push_back(n);
  return t;
}

}  // namespace

TEST_CASE("sglrp_init: worked examples") {
  const Tensor saturated = sglrp_init(vec({1, 0}), 0);
  CHECK(saturated[0] == 0.0f);
  CHECK(saturated[1] == 0.0f);
  const Tensor r = sglrp_init(vec({0.5f, 0.5f}), 0);
  CHECK(r[0] == doctest::Approx(0.25));
  CHECK(r[1] == doctest::Approx(-0.25));
  const Tensor q = sglrp_init(vec({0.8f, 0.15f, 0.05f}), 0);
  CHECK(q[0] == doctest::Approx(0.16).epsilon(1e-6));
  CHECK(q[1] == doctest::Approx(-0.12).epsilon(1e-6));
  CHECK(q[2] == doctest::Approx(-0.04).epsilon(1e-6));
  CHECK_THROWS_AS(sglrp_init(vec({0.5f, 0.4f}), 0), UsageError);
  CHECK_THROWS_AS(sglrp_init(vec({0.5f, 0.5f}), 2), UsageError);
}

TEST_CASE("sglrp_init sums to zero and multinode with one target matches it") {
  std::mt19937 rng(17);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = rad::testing::random_size(rng, 2, 12);
    const Tensor y = random_simplex(rng, n);
    const std::size_t t = rad::testing::random_size(rng, 0, n - 1);
    const Tensor r = sglrp_init(y, t);
    CHECK(std::abs(tensor_sum(r)) <= 1e-6);
    const std::size_t targets[] = {t};
    CHECK(multinode_init(y, n, targets).identical(r));
  }
}

TEST_CASE("multinode_init: worked examples and errors") {
  const std::size_t t02[] = {0, 2};
  const Tensor r = multinode_init(vec({0.6f, 0.4f, 0.7f, 0.3f}), 2, t02);
  CHECK(r[0] == doctest::Approx(0.24).epsilon(1e-6));
  CHECK(r[1] == doctest::Approx(-0.26).epsilon(1e-6));
  CHECK(r[2] == doctest::Approx(0.21).epsilon(1e-6));
  CHECK(r[3] == doctest::Approx(-0.195).epsilon(1e-6));

  const std::size_t t13[] = {1, 3};
  const Tensor z = multinode_init(vec({1, 0, 1, 0}), 2, t13);
  CHECK(z[0] == 0.0f);
  CHECK(z[2] == 0.0f);

  CHECK_THROWS_AS(multinode_init(vec({0.6f, 0.4f}), 2, {}), EmptyTargetError);
  const std::size_t repeated[] = {0, 0};
  CHECK_THROWS_AS(multinode_init(vec({0.6f, 0.4f}), 2, repeated), UsageError);
  const std::size_t t0[] = {0};
  CHECK_THROWS_AS(multinode_init(vec({0.6f, 0.3f}), 2, t0), UsageError);
}

TEST_CASE("z+ rule: worked examples") {
  Tensor w11({1, 1});
  w11[0] = 1.0f;
  CHECK(propagate_zplus(vec({2}), w11, vec({5}))[0] == doctest::Approx(5.0));
  const Tensor w21 = Tensor({2, 1}, 1.0f);
  const Tensor r = propagate_zplus(vec({1, 3}), w21, vec({4}));
  CHECK(r[0] == doctest::Approx(1.0));
  CHECK(r[1] == doctest::Approx(3.0));
  const Tensor neg = Tensor({2, 1}, -1.0f);
  const Tensor z = propagate_zplus(vec({1, 3}), neg, vec({4}));
  CHECK(z[0] == 0.0f);
  CHECK(z[1] == 0.0f);
  CHECK_THROWS_AS(propagate_zplus(vec({-1, 3}), w21, vec({4})), UsageError);
}

TEST_CASE("zB rule: worked examples") {
  Tensor w({1, 1});
  w[0] = 1.0f;
  CHECK(propagate_zb(vec({0.5f}), w, vec({0}), vec({1}), vec({3}))[0] == doctest::Approx(3.0));
  const Tensor pos = Tensor({2, 1}, 0.5f);
  const Tensor r = propagate_zb(vec({0.2f, 0.4f}), pos, vec({0.2f, 0.4f}), vec({1, 1}), vec({2}));
  CHECK(r[0] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(r[1] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK_THROWS_AS(propagate_zb(vec({0.5f}), w, vec({1}), vec({0}), vec({3})), UsageError);
}

TEST_CASE("conservation on random bias-free layers") {
  std::mt19937 rng(23);
  int dense_checked = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = rad::testing::random_size(rng, 2, 10), k = rad::testing::random_size(rng, 1, 6);
    const Tensor a = random_tensor(rng, {n}, 0.1f, 2.0f);
    const Tensor w = random_tensor(rng, {n, k}, 0.05f, 1.0f);  // every output has a positive contribution
    const Tensor r_out = random_tensor(rng, {k}, -1.0f, 1.0f);
    const double out = tensor_sum(r_out);
    if (std::abs(out) < 1e-3) continue;
    CHECK(std::abs(tensor_sum(propagate_zplus(a, w, r_out)) - out) / std::abs(out) <= 1e-4);

    const Tensor x = random_tensor(rng, {n}, 0.0f, 1.0f);
    const Tensor wz = random_tensor(rng, {n, k}, -1.0f, 1.0f);
    CHECK(std::abs(tensor_sum(propagate_zb(x, wz, Tensor({n}, 0.0f), Tensor({n}, 1.0f), r_out)) - out) /
              std::abs(out) <=
          1e-4);
    ++dense_checked;
  }
  CHECK(dense_checked >= 95);

  for (int i = 0; i < 100; ++i) {
    const std::size_t ci = rad::testing::random_size(rng, 1, 4), co = rad::testing::random_size(rng, 1, 4);
    const std::size_t stride = rad::testing::random_size(rng, 1, 2), side = 6;
    const Tensor a = random_tensor(rng, {ci, side, side}, 0.1f, 2.0f);
    const Tensor w = random_tensor(rng, {co, ci, 3, 3}, 0.05f, 1.0f);
    const std::size_t out_side = (side + 2 - 3) / stride + 1;
    const Tensor r_out = random_tensor(rng, {co, out_side, out_side}, 0.0f, 1.0f);
    const double out = tensor_sum(r_out);
    CHECK(std::abs(tensor_sum(propagate_zplus_conv(a, w, r_out, stride, 1)) - out) / out <= 1e-4);

    // Without padding the zB lower/upper terms cover every contribution.
    const Tensor x = random_tensor(rng, {ci, side, side}, 0.0f, 1.0f);
    const Tensor wz = random_tensor(rng, {co, ci, 3, 3}, -1.0f, 1.0f);
    const std::size_t valid_side = (side - 3) / stride + 1;
    const Tensor r_valid = random_tensor(rng, {co, valid_side, valid_side}, 0.0f, 1.0f);
    const double valid = tensor_sum(r_valid);
    const Tensor r_in = propagate_zb_conv(x, wz, Tensor(x.shape(), 0.0f), Tensor(x.shape(), 1.0f), r_valid, stride, 0);
    CHECK(std::abs(tensor_sum(r_in) - valid) / valid <= 1e-4);
  }
}

TEST_CASE("graph rules match a direct float64 evaluation of the formulas") {
  std::mt19937 rng(29);
  for (int i = 0; i < 50; ++i) {
    const std::size_t n = 5, k = 3;
    const Tensor x = random_tensor(rng, {n}, 0.0f, 1.0f), lo = random_tensor(rng, {n}, -1.0f, 0.0f),
                 hi = random_tensor(rng, {n}, 1.0f, 2.0f);
    const Tensor w = random_tensor(rng, {n, k}, -1.0f, 1.0f), r_out = random_tensor(rng, {k}, -1.0f, 1.0f);
    const Tensor got = propagate_zb(x, w, lo, hi, r_out);
    const Tensor got_plus = propagate_zplus(x, w, r_out);
    for (std::size_t p = 0; p < n; ++p) {
      double expect = 0.0, expect_plus = 0.0;
      for (std::size_t m = 0; m < k; ++m) {
        double den = 0.0, den_plus = 0.0;
        for (std::size_t q = 0; q < n; ++q) {
          const double wq = w[q * k + m];
          den += x[q] * wq - lo[q] * std::max(wq, 0.0) - hi[q] * std::min(wq, 0.0);
          den_plus += x[q] * std::max(wq, 0.0);
        }
        const double wp = w[p * k + m];
        const double num = x[p] * wp - lo[p] * std::max(wp, 0.0) - hi[p] * std::min(wp, 0.0);
        expect += num / (den + (den >= 0 ? 1e-9 : -1e-9)) * r_out[m];
        expect_plus += x[p] * std::max(wp, 0.0) / (den_plus + 1e-9) * r_out[m];
      }
      CHECK(got[p] == doctest::Approx(expect).epsilon(1e-4).scale(1.0));
      CHECK(got_plus[p] == doctest::Approx(expect_plus).epsilon(1e-4).scale(1.0));
    }
  }
}

TEST_CASE("relevance map: finite on noise for every kind and invariant to target order") {
  const auto model = toynet::build_detector(toynet::Arch::kA, 4, 3);
  const Tensor img = noise_image(5);
  const auto pool = toynet::decode_all(model.head(), toynet::forward(model, img));
  std::vector<toynet::Detection> picked(pool.begin(), pool.begin() + 6);

  for (TargetKind kind : {TargetKind::kClassification, TargetKind::kSize, TargetKind::kLocalization}) {
    TargetSet t;
    t.kind = kind;
    for (const auto& d : picked)
      for (const auto& n : nodes_for(d, kind)) t.nodes.push_back(n);
    const Tensor h = relevance_map(model, img, t);
    CHECK(h.shape() == Shape{128, 128});
    CHECK(h.all_finite());
    TargetSet reversed = t;
    std::reverse(reversed.nodes.begin(), reversed.nodes.end());
    CHECK(relevance_map(model, img, reversed).identical(h));
  }
}

TEST_CASE("relevance map: error paths") {
  const auto model = toynet::build_detector(toynet::Arch::kA, 4, 3);
  const Tensor img = noise_image(6);
  const auto pool = toynet::decode_all(model.head(), toynet::forward(model, img));
  const RelevanceGraph rg(model, TargetKind::kClassification);
  CHECK_THROWS_AS(rg.bind(img, TargetSet{}, pool), EmptyTargetError);
  TargetSet stale;
  stale.nodes.push_back({model.head().box_count(), toynet::kFirstClass});
  CHECK_THROWS_AS(rg.bind(img, stale, pool), UsageError);
  TargetSet wrong_field;
  wrong_field.nodes.push_back({0, toynet::kTw});
  CHECK_THROWS_AS(rg.bind(img, wrong_field, pool), UsageError);
  TargetSet repeated;
  repeated.nodes = {{0, toynet::kFirstClass}, {0, toynet::kFirstClass}};
  CHECK_THROWS_AS(rg.bind(img, repeated, pool), UsageError);
  TargetSet size;
  size.kind = TargetKind::kSize;
  size.nodes.push_back({0, toynet::kTw});
  CHECK_THROWS_AS(rg.bind(img, size, pool), UsageError);
  TargetSet fine;
  fine.nodes.push_back({0, toynet::kFirstClass});
  CHECK_THROWS_AS(rg.bind(img, fine, std::span(pool).first(3)), UsageError);
  CHECK_THROWS_AS(parse_target_kind("shape"), UsageError);
}

TEST_CASE("gradient of sum(h) matches finite differences on a 32x32 model") {
  // Trained weights on a 32x32 crop centred on an object. With untrained
  // weights the class probabilities barely move and the gradient is noise.
  toynet::HeadLayout head;
  head.input_side = 32;
  head.grid = 2;
  const toynet::Model model(toynet::Arch::kA, head, rad::testing::trained_model(toynet::Arch::kA).layers());
  const auto sample = corpus::generate_sample(12, 0, 4);
  const Box& box = sample.annotations.front().box;
  const int ox = std::clamp(static_cast<int>(box.x + box.w / 2) - 16, 0, 96);
  const int oy = std::clamp(static_cast<int>(box.y + box.h / 2) - 16, 0, 96);
  Tensor img({32, 32, 3});
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) img[(y * 32 + x) * 3 + c] = sample.image[((oy + y) * 128 + ox + x) * 3 + c];
  const auto pool = toynet::decode_all(head, toynet::forward(model, img));
  auto ranked = pool;
  toynet::sort_by_confidence(ranked);

  for (TargetKind kind : {TargetKind::kClassification, TargetKind::kSize, TargetKind::kLocalization}) {
    TargetSet t;
    t.kind = kind;
    for (std::size_t i = 0; i < 3; ++i)
      for (const auto& n : nodes_for(ranked[i], kind)) t.nodes.push_back(n);
    const RelevanceGraph rg(model, kind);
    const Bindings bindings = rg.bind(img, t, pool);
    std::mt19937 rng(31);
    std::vector<std::size_t> pixels(20);
    for (auto& p : pixels) p = rad::testing::random_size(rng, 0, 3 * 32 * 32 - 1);
    const auto report = finite_diff_check(rg.graph(), bindings, rg.signed_sum(), "image", 0.01f, 1e-2, pixels);
    INFO("kind " << std::string(target_kind_name(kind)) << " max rel error " << report.max_rel_error << " checked "
                 << report.checked);
    CHECK(report.pass);
    CHECK(report.checked >= 15);
  }
}

TEST_CASE("trained detector: relevance concentrates on the objects") {
  const auto model = rad::testing::trained_model(toynet::Arch::kA);
  const auto samples = rad::testing::test_split(12, 50);
  double inside = 0.0, total = 0.0;
  for (const auto& s : samples) {
    const auto dets = toynet::detect(model, s.image);
    if (dets.empty()) continue;
    const Tensor h = relevance_map(model, s.image, class_targets(dets));
    REQUIRE(h.all_finite());
    std::vector<char> mask(128 * 128, 0);
    for (const auto& a : s.annotations) {
      const int x0 = std::max(0, static_cast<int>(std::floor(a.box.x)) - 8);
      const int y0 = std::max(0, static_cast<int>(std::floor(a.box.y)) - 8);
      const int x1 = std::min(128, static_cast<int>(std::ceil(a.box.right())) + 8);
      const int y1 = std::min(128, static_cast<int>(std::ceil(a.box.bottom())) + 8);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) mask[y * 128 + x] = 1;
    }
    for (std::size_t i = 0; i < h.size(); ++i) {
      total += std::abs(h[i]);
      if (mask[i]) inside += std::abs(h[i]);
    }
  }
  REQUIRE(total > 0.0);
  MESSAGE("relevance mass inside dilated boxes: " << inside / total);
  CHECK(inside / total >= 0.6);
}

TEST_CASE("to_gray: min-max normalisation") {
  const Tensor g = to_gray(vec({-1, 0, 1}));
  CHECK(g[0] == 0.0f);
  CHECK(g[1] == 128.0f);
  CHECK(g[2] == 255.0f);
  const Tensor flat = to_gray(vec({3, 3}));
  CHECK(flat[0] == 0.0f);
  CHECK(flat[1] == 0.0f);
}
