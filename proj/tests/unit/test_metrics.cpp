#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "rad/core/error.hpp"
#include "rad/metrics/metrics.hpp"
#include "support/map_oracle.hpp"

using namespace rad;
using namespace rad::metrics;
using namespace rad::testing;

namespace {

// IoU by counting unit cells of an integer grid.
double raster_iou(int ax, int ay, int aw, int ah, int bx, int by, int bw, int bh) {
  int inter = 0, uni = 0;
  for (int y = std::min(ay, by); y < std::max(ay + ah, by + bh); ++y)
    for (int x = std::min(ax, bx); x < std::max(ax + aw, bx + bw); ++x) {
      const bool in_a = x >= ax && x < ax + aw && y >= ay && y < ay + ah;
      const bool in_b = x >= bx && x < bx + bw && y >= by && y < by + bh;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  return static_cast<double>(inter) / uni;
}

}  // namespace

TEST_CASE("iou: identity, disjoint, hand case, symmetry") {
  const Box a{0, 0, 2, 2}, b{1, 1, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{5, 5, 1, 1}) == 0.0);
  CHECK(iou(a, b) == 1.0 / 7.0);
  CHECK(iou(a, b) == raster_iou(0, 0, 2, 2, 1, 1, 2, 2));
  CHECK(iou(a, b) == iou(b, a));
  CHECK_THROWS_AS(iou(a, Box{0, 0, 0, 1}), UsageError);

  std::mt19937 rng(3);
  std::uniform_int_distribution<int> pos(0, 8), ext(1, 6);
  for (int i = 0; i < 200; ++i) {
    const int ax = pos(rng), ay = pos(rng), aw = ext(rng), ah = ext(rng);
    const int bx = pos(rng), by = pos(rng), bw = ext(rng), bh = ext(rng);
    CHECK(iou(Box{float(ax), float(ay), float(aw), float(ah)}, Box{float(bx), float(by), float(bw), float(bh)}) ==
          doctest::Approx(raster_iou(ax, ay, aw, ah, bx, by, bw, bh)).epsilon(1e-12));
  }
}

TEST_CASE("map_coco: perfect detector and empty predictions") {
  const std::vector<ImageTruths> gts{{{Box{10, 10, 20, 20}, 0}}};
  const std::vector<ImagePredictions> perfect{{{Box{10, 10, 20, 20}, 0, 0.9f}}};
  const MapResult r = map_coco(perfect, gts);
  CHECK(r.map == 1.0);
  CHECK(r.map50 == 1.0);
  CHECK(r.map75 == 1.0);
  const std::vector<ImagePredictions> none{{}};
  CHECK(map_coco(none, gts).map == 0.0);
}

TEST_CASE("map_coco: one hit then one false positive caps recall at one half") {
  const std::vector<ImageTruths> gts{{{Box{0, 0, 10, 10}, 0}, {Box{50, 50, 10, 10}, 0}}};
  const std::vector<ImagePredictions> preds{{{Box{0, 0, 10, 10}, 0, 0.9f}, {Box{90, 90, 10, 10}, 0, 0.5f}}};
  const double ap = average_precision(preds, gts, 0, 0.5);
  // Recall points 0.00..0.50 see precision 1 on the 101-point grid.
  CHECK(ap == doctest::Approx(51.0 / 101.0).epsilon(1e-12));
  CHECK(ap == doctest::Approx(0.5).epsilon(0.01));
  CHECK(ap == doctest::Approx(oracle_ap(preds, gts, 0, 0.5)).epsilon(1e-12));
}

TEST_CASE("map_coco matches the cutoff-enumeration oracle on small cases") {
  std::mt19937 rng(11);
  const auto thresholds = coco_thresholds();
  for (int trial = 0; trial < 300; ++trial) {
    const Case c = random_case(rng);
    double expected = 0.0;
    for (double t : thresholds) expected += oracle_map(c.preds, c.gts, t);
    expected /= thresholds.size();
    const MapResult r = map_coco(c.preds, c.gts);
    CHECK(std::abs(r.map - expected) <= 1e-9);
    CHECK(std::abs(r.map50 - oracle_map(c.preds, c.gts, 0.5)) <= 1e-9);
    CHECK(std::abs(r.map75 - oracle_map(c.preds, c.gts, 0.75)) <= 1e-9);
  }
}

TEST_CASE("map_coco: zero-confidence duplicate never helps, image order irrelevant") {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Case c = random_case(rng);
    const double base = map_coco(c.preds, c.gts).map;
    Case dup = c;
    for (auto& im : dup.preds)
      if (!im.empty()) im.push_back({im.front().box, im.front().class_id, 0.0f});
    CHECK(map_coco(dup.preds, dup.gts).map <= base + 1e-12);

    std::vector<std::size_t> order(c.preds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    Case perm;
    for (std::size_t i : order) perm.preds.push_back(c.preds[i]), perm.gts.push_back(c.gts[i]);
    CHECK(map_coco(perm.preds, perm.gts).map == doctest::Approx(base).epsilon(1e-12));
    CHECK(mar(perm.preds, perm.gts) == doctest::Approx(mar(c.preds, c.gts)).epsilon(1e-12));
  }
}

TEST_CASE("map_coco: classes without ground truth are left out") {
  const std::vector<ImageTruths> gts{{{Box{0, 0, 10, 10}, 0}}};
  const std::vector<ImagePredictions> preds{{{Box{0, 0, 10, 10}, 0, 0.9f}, {Box{40, 40, 10, 10}, 3, 0.8f}}};
  CHECK(map_coco(preds, gts).map == 1.0);
  CHECK(average_precision(preds, gts, 3, 0.5) < 0.0);
  const std::vector<ImageTruths> empty{{}};
  CHECK(map_coco(preds, empty).map == 0.0);
}

TEST_CASE("box_accuracy: four hits out of six") {
  // cats 0, dogs 1, car 2, person 3
  ImagePredictions preds;
  float conf = 0.9f;
  for (std::size_t c : {0, 0, 0, 1, 1, 2}) preds.push_back({Box{0, 0, 1, 1}, c, conf -= 0.1f});
  ImageTruths gts;
  for (std::size_t c : {0, 0, 1, 1, 1, 3}) gts.push_back({Box{0, 0, 1, 1}, c});
  const SlotScore s = box_accuracy(preds, gts);
  CHECK(s.score == 4.0);
  CHECK(s.slots == 6);
  CHECK(s.fraction() == 4.0 / 6.0);
}

TEST_CASE("box_accuracy: exact classes and empty predictions") {
  ImageTruths gts{{Box{0, 0, 5, 5}, 1}, {Box{9, 9, 5, 5}, 2}};
  ImagePredictions same{{Box{0, 0, 5, 5}, 2, 0.4f}, {Box{9, 9, 5, 5}, 1, 0.6f}};
  CHECK(box_accuracy(same, gts).fraction() == 1.0);
  CHECK(box_accuracy(ImagePredictions{}, gts).fraction() == 0.0);
  // Only the |gts| most confident predictions count.
  ImagePredictions extra = same;
  extra.push_back({Box{0, 0, 5, 5}, 3, 0.9f});
  CHECK(box_accuracy(extra, gts).fraction() == 0.5);
}

TEST_CASE("mean_iou_metric: definition cases") {
  const ImageTruths gts{{Box{0, 0, 10, 10}, 0}, {Box{20, 20, 10, 10}, 1}};
  const ImagePredictions perfect{{Box{0, 0, 10, 10}, 0, 0.9f}, {Box{20, 20, 10, 10}, 1, 0.8f}};
  CHECK(mean_iou_metric(perfect, gts).fraction() == 1.0);
  const ImagePredictions shifted{{Box{50, 50, 10, 10}, 0, 0.9f}, {Box{70, 70, 10, 10}, 1, 0.8f}};
  CHECK(mean_iou_metric(shifted, gts).fraction() == 0.0);
  const ImagePredictions one_wrong{{Box{0, 0, 10, 10}, 3, 0.9f}, {Box{20, 20, 10, 10}, 1, 0.8f}};
  CHECK(mean_iou_metric(one_wrong, gts).fraction() == 0.5);
  CHECK(mean_iou_metric(ImagePredictions{}, gts).fraction() == 0.0);
}

TEST_CASE("mar: perfect, empty and half-detected") {
  const std::vector<ImageTruths> gts{{{Box{0, 0, 10, 10}, 0}, {Box{30, 30, 10, 10}, 0}},
                                     {{Box{5, 5, 10, 10}, 0}, {Box{60, 60, 10, 10}, 0}}};
  const std::vector<ImagePredictions> perfect{{{Box{0, 0, 10, 10}, 0, 0.9f}, {Box{30, 30, 10, 10}, 0, 0.8f}},
                                              {{Box{5, 5, 10, 10}, 0, 0.7f}, {Box{60, 60, 10, 10}, 0, 0.6f}}};
  CHECK(mar(perfect, gts) == 1.0);
  const std::vector<ImagePredictions> none{{}, {}};
  CHECK(mar(none, gts) == 0.0);
  const std::vector<ImagePredictions> half{{{Box{0, 0, 10, 10}, 0, 0.9f}}, {{Box{60, 60, 10, 10}, 0, 0.6f}}};
  for (double t : coco_thresholds()) {
    const std::vector<double> one{t};
    CHECK(mar(half, gts, one) == 0.5);
  }
}

TEST_CASE("rmse: zero, constant, hand case, shape mismatch") {
  const Tensor x({4, 4, 3}, 100.0f);
  CHECK(rmse(x, x) == 0.0);
  CHECK(rmse(x, Tensor({4, 4, 3}, 104.0f)) == 4.0);
  CHECK(rmse(Tensor::vector({0, 0}), Tensor::vector({3, 4})) == doctest::Approx(std::sqrt(12.5)).epsilon(1e-12));
  CHECK(rmse(Tensor::vector({0, 0}), Tensor::vector({3, 4})) == doctest::Approx(3.5355).epsilon(1e-4));
  CHECK_THROWS_AS(rmse(x, Tensor({4, 4, 1})), ShapeError);

  // Consistent pixel permutation leaves RMSE unchanged; l-inf bound caps it.
  std::mt19937 rng(2);
  std::uniform_real_distribution<float> d(-16.0f, 16.0f);
  Tensor a({64}), b({64});
  for (std::size_t i = 0; i < 64; ++i) a[i] = 128.0f, b[i] = 128.0f + d(rng);
  std::vector<std::size_t> perm(64);
  for (std::size_t i = 0; i < 64; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor pa({64}), pb({64});
  for (std::size_t i = 0; i < 64; ++i) pa[i] = a[perm[i]], pb[i] = b[perm[i]];
  CHECK(rmse(pa, pb) == doctest::Approx(rmse(a, b)).epsilon(1e-12));
  CHECK(rmse(a, b) <= 16.0);
}
