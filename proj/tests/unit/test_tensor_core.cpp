#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "rad/core/error.hpp"
#include "rad/core/finite_diff.hpp"
#include "rad/core/graph.hpp"
#include "support/random.hpp"

using namespace rad;
using rad::testing::random_tensor;

namespace {

std::vector<float> vals(const Tensor& t) { return {t.data(), t.data() + t.size()}; }

}  // namespace

TEST_CASE("evaluate: doubling, relu, softmax") {
  {
    GraphBuilder b;
    auto x = b.input("x", {2});
    b.mark_output("y", b.add(x, x));
    auto g = std::move(b).finish();
    auto e = g->evaluate({{"x", Tensor::vector({1, 2})}});
    CHECK(vals(e.output("y")) == std::vector<float>{2, 4});
  }
  {
    GraphBuilder b;
    auto x = b.input("x", {3});
    b.mark_output("y", b.relu(x));
    auto g = std::move(b).finish();
    CHECK(vals(g->evaluate({{"x", Tensor::vector({-1, 0, 3})}}).output("y")) == std::vector<float>{0, 0, 3});
  }
  {
    GraphBuilder b;
    auto x = b.input("x", {2});
    b.mark_output("y", b.softmax(x));
    auto g = std::move(b).finish();
    CHECK(vals(g->evaluate({{"x", Tensor::vector({0, 0})}}).output("y")) == std::vector<float>{0.5f, 0.5f});
  }
}

TEST_CASE("evaluate errors") {
  GraphBuilder b;
  auto x = b.input("x", {2});
  auto y = b.div(b.scalar(1.0f), x);
  b.mark_output("y", y);
  auto g = std::move(b).finish();
  CHECK_THROWS_AS(g->evaluate({}), UsageError);
  CHECK_THROWS_AS(g->evaluate({{"x", Tensor::vector({1, 2, 3})}}), ShapeError);
  CHECK_THROWS_AS(g->evaluate({{"x", Tensor::vector({1, 0})}}), NumericError);
}

TEST_CASE("gradient: linear and quadratic") {
  GraphBuilder b;
  auto x = b.input("x", {3});
  auto s1 = b.sum(x);
  auto s2 = b.sum(b.mul(x, x));
  auto g = std::move(b).finish();
  auto e = g->evaluate({{"x", Tensor::vector({1, 2, 3})}});
  CHECK(vals(g->gradient(e, s1, x)) == std::vector<float>{1, 1, 1});
  CHECK(vals(g->gradient(e, s2, x)) == std::vector<float>{2, 4, 6});
}

TEST_CASE("gradient errors and unreachable leaves") {
  GraphBuilder b;
  auto x = b.input("x", {3});
  auto z = b.input("z", {2});
  auto y = b.relu(x);
  auto s = b.sum(y);
  auto g = std::move(b).finish();
  auto e = g->evaluate({{"x", Tensor::vector({1, 2, 3})}, {"z", Tensor::vector({1, 1})}});
  CHECK_THROWS_AS(g->gradient(e, y, x), ShapeError);
  CHECK_THROWS_AS(g->gradient(e, s, y), UsageError);
  CHECK(vals(g->gradient(e, s, z)) == std::vector<float>{0, 0});
}

TEST_CASE("gradient of sum is all ones for any shape") {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape;
    const auto rank = rad::testing::random_size(rng, 1, 4);
    for (std::size_t i = 0; i < rank; ++i) shape.push_back(rad::testing::random_size(rng, 1, 5));
    GraphBuilder b;
    auto x = b.input("x", shape);
    auto s = b.sum(x);
    auto g = std::move(b).finish();
    auto e = g->evaluate({{"x", random_tensor(rng, shape)}});
    auto grad = g->gradient(e, s, x);
    for (float v : grad.values()) CHECK(v == 1.0f);
  }
}

TEST_CASE("finite difference oracle on sum(relu(Wx))") {
  std::mt19937 rng(5);
  GraphBuilder b;
  auto w = b.input("w", {4, 6});
  auto x = b.input("x", {6, 1});
  auto s = b.sum(b.relu(b.matmul(w, x)));
  auto g = std::move(b).finish();
  Bindings bind{{"w", random_tensor(rng, {4, 6})}, {"x", random_tensor(rng, {6, 1})}};
  auto report = finite_diff_check(*g, bind, s, "x", 1e-3f, 1e-3);
  CHECK(report.pass);
  CHECK(report.checked > 0);
}

TEST_CASE("finite difference: linear scalar is exact, relu kink is flagged") {
  GraphBuilder b;
  auto x = b.input("x", {3});
  auto lin = b.sum(b.mul(x, b.constant(Tensor::vector({1.0f, -2.0f, 0.5f}))));
  auto kink = b.sum(b.relu(x));
  auto g = std::move(b).finish();
  Bindings bind{{"x", Tensor::vector({0.25f, 0.0f, 1.0f})}};
  for (float step : {1e-3f, 1e-1f, 1.0f}) {
    auto r = finite_diff_check(*g, bind, lin, "x", step, 1e-3);
    CHECK(r.pass);
    CHECK(r.max_rel_error < 1e-5);
  }
  auto r = finite_diff_check(*g, bind, kink, "x", 1e-3f, 1e-3);
  CHECK(r.pass);
  REQUIRE(r.nondifferentiable.size() == 1);
  CHECK(r.nondifferentiable[0] == 1);
}

TEST_CASE("finite difference on a tiny conv-relu-sum graph") {
  std::mt19937 rng(8);
  GraphBuilder b;
  auto x = b.input("x", {2, 6, 6});
  auto w = b.constant(random_tensor(rng, {3, 2, 3, 3}));
  auto y = b.relu(b.conv2d(x, w, 2, 1));
  auto s = b.sum(b.mul(y, b.constant(random_tensor(rng, {3, 3, 3}, 0.5f, 1.5f))));
  auto g = std::move(b).finish();
  auto report = finite_diff_check(*g, {{"x", random_tensor(rng, {2, 6, 6})}}, s, "x", 1e-3f, 1e-3);
  CHECK(report.pass);
}

namespace {

// One random instance of a primitive: builds op(leaves...) and returns output.
struct PrimitiveCase {
  const char* name;
  std::vector<std::pair<Shape, std::pair<float, float>>> inputs;
  std::function<NodeId(GraphBuilder&, const std::vector<NodeId>&)> build;
};

void check_primitive(const PrimitiveCase& pc, std::mt19937& rng) {
  GraphBuilder b;
  std::vector<NodeId> leaves;
  Bindings bind;
  for (std::size_t i = 0; i < pc.inputs.size(); ++i) {
    const std::string name = "in" + std::to_string(i);
    leaves.push_back(b.input(name, pc.inputs[i].first));
    bind.emplace(name, random_tensor(rng, pc.inputs[i].first, pc.inputs[i].second.first, pc.inputs[i].second.second));
  }
  auto y = pc.build(b, leaves);
  const Tensor weights = random_tensor(rng, b.shape(y), 0.5f, 1.5f);
  auto s = b.sum(b.mul(y, b.constant(weights)));
  auto g = std::move(b).finish();
  for (std::size_t i = 0; i < pc.inputs.size(); ++i) {
    auto report = finite_diff_check(*g, bind, s, "in" + std::to_string(i), 1e-3f, 1e-3);
    INFO(std::string(pc.name) << " input " << i << " max rel " << report.max_rel_error);
    CHECK(report.pass);
  }
}

}  // namespace

TEST_CASE("every differentiable primitive passes finite differences on 100 random instances") {
  const std::pair<float, float> unit{-1.0f, 1.0f};
  const std::pair<float, float> positive{0.5f, 2.0f};
  std::vector<PrimitiveCase> cases = {
      {"add", {{{3, 4}, unit}, {{3, 4}, unit}}, [](auto& b, auto& l) { return b.add(l[0], l[1]); }},
      {"sub", {{{3, 4}, unit}, {{4}, unit}}, [](auto& b, auto& l) { return b.sub(l[0], l[1]); }},
      {"mul", {{{5}, unit}, {{5}, unit}}, [](auto& b, auto& l) { return b.mul(l[0], l[1]); }},
      {"div", {{{5}, unit}, {{5}, positive}}, [](auto& b, auto& l) { return b.div(l[0], l[1]); }},
      // Positive operands: a relative check on a sum that cancels to ~1e-5
      // measures float32 rounding, not the gradient.
      {"matmul", {{{3, 4}, positive}, {{4, 2}, unit}}, [](auto& b, auto& l) { return b.matmul(l[0], l[1]); }},
      {"matmul_t", {{{3, 4}, positive}, {{2, 4}, positive}}, [](auto& b, auto& l) { return b.matmul(l[0], l[1], true); }},
      {"conv2d", {{{2, 5, 5}, unit}, {{3, 2, 3, 3}, unit}}, [](auto& b, auto& l) { return b.conv2d(l[0], l[1], 2, 1); }},
      {"conv2d_1x1", {{{2, 3, 3}, unit}, {{2, 2, 1, 1}, unit}}, [](auto& b, auto& l) { return b.conv2d(l[0], l[1], 1, 0); }},
      {"conv2d_transpose",
       {{{3, 3, 3}, unit}, {{3, 2, 3, 3}, unit}},
       [](auto& b, auto& l) { return b.conv2d_transpose(l[0], l[1], 2, 1, 6, 6); }},
      {"sigmoid", {{{6}, {-2.0f, 2.0f}}}, [](auto& b, auto& l) { return b.sigmoid(l[0]); }},
      {"softplus", {{{6}, {-2.0f, 2.0f}}}, [](auto& b, auto& l) { return b.softplus(l[0]); }},
      {"softmax", {{{2, 4}, unit}}, [](auto& b, auto& l) { return b.softmax(l[0]); }},
      {"softmax_axis0", {{{3, 2}, unit}}, [](auto& b, auto& l) { return b.softmax(l[0], 0); }},
      {"log_softmax", {{{2, 4}, unit}}, [](auto& b, auto& l) { return b.log_softmax(l[0], 0); }},
      {"sum", {{{2, 3}, unit}}, [](auto& b, auto& l) { return b.sum(l[0]); }},
      {"sum_axis", {{{2, 3, 2}, unit}}, [](auto& b, auto& l) { return b.sum(l[0], 1); }},
      {"mean", {{{7}, unit}}, [](auto& b, auto& l) { return b.mean(l[0]); }},
      {"max", {{{7}, unit}}, [](auto& b, auto& l) { return b.max(l[0]); }},
      {"clamp", {{{6}, {-2.0f, 2.0f}}}, [](auto& b, auto& l) { return b.clamp(l[0], -1.0f, 1.0f); }},
      {"relu", {{{6}, unit}}, [](auto& b, auto& l) { return b.relu(l[0]); }},
      {"stabilize", {{{4}, unit}}, [](auto& b, auto& l) { return b.stabilize(l[0], 1e-9f); }},
      {"broadcast", {{{3, 1}, unit}}, [](auto& b, auto& l) { return b.broadcast(l[0], {2, 3, 4}); }},
      {"reshape", {{{2, 3}, unit}}, [](auto& b, auto& l) { return b.reshape(l[0], {3, 2}); }},
      {"concat",
       {{{2, 2}, unit}, {{2, 3}, unit}},
       [](auto& b, auto& l) {
         const NodeId parts[] = {l[0], l[1]};
         return b.concat(parts, 1);
       }},
      {"slice", {{{3, 5}, unit}}, [](auto& b, auto& l) { return b.slice(l[0], 1, 1, 4); }},
  };
  std::mt19937 rng(2024);
  for (const auto& pc : cases)
    for (int trial = 0; trial < 100; ++trial) check_primitive(pc, rng);
}

TEST_CASE("chain rule: composed graph equals fused gradient") {
  // f(g(x)) with g = softmax(Wx) recorded once as a single graph, and once as
  // two graphs chained by hand through the vector-Jacobian product.
  std::mt19937 rng(17);
  const Tensor w = random_tensor(rng, {4, 5});
  const Tensor xv = random_tensor(rng, {5, 1});
  const Tensor r = random_tensor(rng, {4, 1});

  GraphBuilder fb;
  auto fx = fb.input("x", {5, 1});
  auto fused = fb.sum(fb.mul(fb.sigmoid(fb.softmax(fb.matmul(fb.constant(w), fx), 0)), fb.constant(r)));
  auto fg = std::move(fb).finish();
  auto grad_fused = fg->gradient(fg->evaluate({{"x", xv}}), fused, fx);

  GraphBuilder gb;
  auto gx = gb.input("x", {5, 1});
  auto inner = gb.softmax(gb.matmul(gb.constant(w), gx), 0);
  auto upstream = gb.input("u", {4, 1});
  auto vjp = gb.sum(gb.mul(inner, upstream));
  gb.mark_output("inner", inner);
  auto gg = std::move(gb).finish();

  GraphBuilder ob;
  auto ox = ob.input("y", {4, 1});
  auto outer = ob.sum(ob.mul(ob.sigmoid(ox), ob.constant(r)));
  auto og = std::move(ob).finish();

  auto e_inner = gg->evaluate({{"x", xv}, {"u", Tensor({4, 1})}});
  const Tensor y = e_inner.output("inner");
  const Tensor u = og->gradient(og->evaluate({{"y", y}}), outer, ox);
  auto grad_chain = gg->gradient(gg->evaluate({{"x", xv}, {"u", u}}), vjp, gx);

  for (std::size_t i = 0; i < 5; ++i)
    CHECK(grad_chain[i] == doctest::Approx(grad_fused[i]).epsilon(1e-6));
}

TEST_CASE("evaluation is bit-for-bit deterministic") {
  std::mt19937 rng(9);
  GraphBuilder b;
  auto x = b.input("x", {3, 16, 16});
  auto w1 = b.constant(random_tensor(rng, {8, 3, 3, 3}));
  auto w2 = b.constant(random_tensor(rng, {4, 8, 3, 3}));
  auto y = b.conv2d(b.relu(b.conv2d(x, w1, 2, 1)), w2, 1, 1);
  auto s = b.sum(b.softmax(y, 0));
  b.mark_output("y", y);
  auto g = std::move(b).finish();
  Bindings bind{{"x", random_tensor(rng, {3, 16, 16})}};
  auto e1 = g->evaluate(bind);
  auto e2 = g->evaluate(bind);
  CHECK(e1.output("y").identical(e2.output("y")));
  CHECK(g->gradient(e1, s, x).identical(g->gradient(e2, s, x)));
}

TEST_CASE("conv2d_transpose is the adjoint of conv2d") {
  std::mt19937 rng(21);
  const Tensor x = random_tensor(rng, {3, 8, 8});
  const Tensor w = random_tensor(rng, {4, 3, 3, 3});
  const Tensor s = random_tensor(rng, {4, 4, 4});
  GraphBuilder b;
  auto xn = b.constant(x), wn = b.constant(w), sn = b.constant(s);
  auto lhs = b.sum(b.mul(b.conv2d(xn, wn, 2, 1), sn));
  auto rhs = b.sum(b.mul(b.conv2d_transpose(sn, wn, 2, 1, 8, 8), xn));
  auto g = std::move(b).finish();
  auto e = g->evaluate({});
  CHECK(e.value(lhs)[0] == doctest::Approx(e.value(rhs)[0]).epsilon(1e-5));
}
