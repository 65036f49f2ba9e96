#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "crnkit/crn.hpp"
#include "crnkit/nn.hpp"
#include "crnkit/rng.hpp"
#include "crnkit/tensor.hpp"

using namespace crnkit;

namespace {

std::vector<Tensor> make_objects(int n, std::size_t K, std::size_t F, Rng& rng) {
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::vector<double> v(K * F);
    for (double& x : v) x = 2.0 * rng.uniform01() - 1.0;
    out.push_back(Tensor::from({K, F}, std::move(v)));
  }
  return out;
}

bool same_tensor(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("conditioning form names round-trip") {
  for (HForm f : {HForm::additive, HForm::multiplicative, HForm::sequential, HForm::dual_additive,
                  HForm::dual_multiplicative, HForm::dual_sequential}) {
    CHECK(hform_from_name(hform_name(f)) == f);
  }
  CHECK(hform_name(HForm::dual_additive) == "dual-additive");
  CHECK_THROWS_AS(hform_from_name("dual_additive"), ConfigError);
  CHECK_THROWS_AS(hform_from_name("bogus"), ConfigError);
  CHECK(hform_blocks(HForm::additive) == 2);
  CHECK(hform_blocks(HForm::multiplicative) == 3);
  CHECK(hform_blocks(HForm::sequential) == 3);
  CHECK(hform_blocks(HForm::dual_additive) == 3);
  CHECK(hform_blocks(HForm::dual_multiplicative) == 5);
  CHECK(hform_blocks(HForm::dual_sequential) == 5);
  CHECK(hform_is_dual(HForm::dual_multiplicative));
  CHECK_FALSE(hform_is_dual(HForm::multiplicative));
  CHECK(hform_is_sequential(HForm::dual_sequential));
}

TEST_CASE("subset sampling draws sorted distinct indices") {
  Rng rng(17);
  auto draws = sample_subsets(8, 3, 2, rng);
  REQUIRE(draws.size() == 2);
  for (const auto& s : draws) {
    REQUIRE(s.size() == 3);
    CHECK(std::is_sorted(s.begin(), s.end()));
    std::set<int> uniq(s.begin(), s.end());
    CHECK(uniq.size() == 3);
    for (int i : s) {
      CHECK(i >= 0);
      CHECK(i < 8);
    }
  }

  Rng a(99), b(99);
  CHECK(sample_subsets(10, 4, 3, a) == sample_subsets(10, 4, 3, b));

  // t must stay strictly below C(n, k): 3 pairs from 3 objects is refused.
  Rng r2(1);
  CHECK_THROWS_AS(sample_subsets(3, 2, 3, r2), SamplingError);
  CHECK_NOTHROW(check_sampling(3, 2, 2));
  CHECK_THROWS_AS(check_sampling(3, 2, 3), SamplingError);
  CHECK_THROWS_AS(check_sampling(3, 4, 1), ConfigError);  // k_max must stay below n
  CHECK_THROWS_AS(check_sampling(5, 3, 0), ConfigError);
  CHECK_THROWS_AS(check_sampling(0, 1, 1), ContractError);

  // Coverage: over many draws of pairs from 5 objects every index appears.
  Rng r3(5);
  std::set<int> seen;
  for (int rep = 0; rep < 40; ++rep) {
    for (const auto& s : sample_subsets(5, 2, 2, r3)) seen.insert(s.begin(), s.end());
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("subset plans cover each size once") {
  Rng rng(3);
  SubsetPlan plan = make_subset_plan(6, 4, 2, rng);
  CHECK(plan.n == 6);
  CHECK(plan.k_begin == 2);
  REQUIRE(plan.draws.size() == 3);  // k = 2, 3, 4
  for (std::size_t i = 0; i < plan.draws.size(); ++i) {
    REQUIRE(plan.draws[i].size() == 2);
    for (const auto& s : plan.draws[i]) CHECK(s.size() == i + 2);
  }

  // n = 2 collapses to the single full pair.
  Rng r2(3);
  SubsetPlan pair = make_subset_plan(2, 2, 2, r2);
  REQUIRE(pair.draws.size() == 1);
  REQUIRE(pair.draws[0].size() == 1);
  CHECK(pair.draws[0][0] == std::vector<int>{0, 1});

  // k_max = 1 draws single objects.
  Rng r3(3);
  SubsetPlan solo = make_subset_plan(6, 1, 3, r3);
  CHECK(solo.k_begin == 1);
  REQUIRE(solo.draws.size() == 1);
  REQUIRE(solo.draws[0].size() == 3);
  for (const auto& s : solo.draws[0]) CHECK(s.size() == 1);
}

TEST_CASE("subset aggregation") {
  std::vector<Tensor> pair{Tensor::from({1, 2}, {1, 2}), Tensor::from({1, 2}, {3, 4})};
  Tensor avg = g_aggregate(pair, GForm::average_pool);
  REQUIRE(avg.shape() == Shape{1, 2});
  CHECK(avg.at({0, 0}) == 2.0);
  CHECK(avg.at({0, 1}) == 3.0);

  // Order inside the subset cannot matter for the average.
  std::vector<Tensor> swapped{pair[1], pair[0]};
  CHECK(same_tensor(avg, g_aggregate(swapped, GForm::average_pool)));

  Tensor cat = g_aggregate(pair, GForm::concat);
  REQUIRE(cat.shape() == Shape{1, 4});
  CHECK(cat.at({0, 2}) == 3.0);

  std::vector<Tensor> ragged{Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 2}, {1, 2, 3, 4})};
  CHECK_THROWS_AS(g_aggregate(ragged, GForm::average_pool), DimensionError);
  CHECK_THROWS_AS(g_aggregate(std::span<const Tensor>{}, GForm::average_pool), ContractError);
}

TEST_CASE("unit output array lengths follow the subset-size range") {
  ParameterStore store(2);
  Rng rng(4);
  const std::size_t K = 2, F = 4;

  CrnUnit u5(store, "u5", {4, 2, GForm::average_pool, HForm::additive}, F);
  CHECK(u5.output_len(5) == 3);
  auto objs5 = make_objects(5, K, F, rng);
  ConditioningContext ctx{Tensor::row({0.1, 0.2, 0.3, 0.4}), std::nullopt};
  auto out5 = u5.forward(objs5, ctx, rng);
  REQUIRE(out5.size() == 3);
  for (const Tensor& r : out5) CHECK(r.shape() == Shape{K, F});

  // Two stacked units shrink an array of 16 by four.
  CrnUnit a(store, "a", {15, 2, GForm::average_pool, HForm::additive}, F);
  CrnUnit b(store, "b", {13, 2, GForm::average_pool, HForm::additive}, F);
  auto mid = a.forward(make_objects(16, K, F, rng), ctx, rng);
  REQUIRE(mid.size() == 14);
  auto top = b.forward(mid, ctx, rng);
  CHECK(top.size() == 12);

  // A pair input yields the single full-set relation.
  CrnUnit u2(store, "u2", {2, 2, GForm::average_pool, HForm::additive}, F);
  CHECK(u2.output_len(2) == 1);
  CHECK(u2.forward(make_objects(2, K, F, rng), ctx, rng).size() == 1);

  // The no-relation ablation keeps one unconditioned-size output.
  CrnUnit u1(store, "u1", {1, 2, GForm::average_pool, HForm::additive}, F);
  CHECK(u1.output_len(6) == 1);
  auto abl = u1.forward(make_objects(6, K, F, rng), ctx, rng);
  REQUIRE(abl.size() == 1);
  CHECK(abl[0].shape() == Shape{K, F});

  // Infeasible sampling surfaces from forward as well.
  CrnUnit u3(store, "u3", {2, 3, GForm::average_pool, HForm::additive}, F);
  Rng r4(1);
  CHECK_THROWS_AS(u3.forward(make_objects(3, K, F, rng), ctx, r4), SamplingError);
}

TEST_CASE("sequential conditioning collapses the object axis") {
  ParameterStore store(11);
  Rng rng(6);
  CrnUnit u(store, "seq", {3, 2, GForm::average_pool, HForm::sequential}, 4);
  ConditioningContext ctx{Tensor::row({0.4, -0.2, 0.1, 0.3}), std::nullopt};
  auto out = u.forward(make_objects(4, 3, 4, rng), ctx, rng);
  REQUIRE(out.size() == 2);
  for (const Tensor& r : out) CHECK(r.shape() == Shape{1, 4});
}

TEST_CASE("conditioning forms compute their fused blocks") {
  ParameterStore store(13);
  const std::size_t F = 2;

  // Additive with zero weights maps everything to elu(0) = 0.
  CrnUnit add_u(store, "add", {2, 1, GForm::average_pool, HForm::additive}, F);
  Parameter* w = store.find("add.k2.h");
  REQUIRE(w != nullptr);
  REQUIRE(w->tensor().shape() == Shape{2 * F, F});
  std::fill(w->tensor().data(), w->tensor().data() + w->tensor().size(), 0.0);
  ConditioningContext ctx{Tensor::row({0.5, -0.5}), std::nullopt};
  Tensor x = Tensor::from({1, 2}, {1.0, 2.0});
  Tensor zero = add_u.condition(x, ctx, 2);
  CHECK(zero.at({0, 0}) == 0.0);
  CHECK(zero.at({0, 1}) == 0.0);

  // Hand-set weights: additive computes elu([x ; c] W).
  double* wd = w->tensor().data();
  // W picks out x[0]+c[0] into column 0 and x[1]-c[1] into column 1.
  wd[0 * F + 0] = 1.0;  // x[0] -> col 0
  wd[1 * F + 1] = 1.0;  // x[1] -> col 1
  wd[2 * F + 0] = 1.0;  // c[0] -> col 0
  wd[3 * F + 1] = -1.0; // c[1] -> col 1
  Tensor y = add_u.condition(x, ctx, 2);
  CHECK(y.at({0, 0}) == doctest::Approx(1.0 + 0.5).epsilon(1e-15));       // elu(1.5)
  CHECK(y.at({0, 1}) == doctest::Approx(2.0 + 0.5).epsilon(1e-15));       // elu(2.5)

  // Multiplicative fuses [x ; x.c ; c]; with c = ones the middle block
  // equals x, checked through a weight that reads only that block.
  CrnUnit mul_u(store, "mul", {2, 1, GForm::average_pool, HForm::multiplicative}, F);
  Parameter* wm = store.find("mul.k2.h");
  REQUIRE(wm != nullptr);
  REQUIRE(wm->tensor().shape() == Shape{3 * F, F});
  std::fill(wm->tensor().data(), wm->tensor().data() + wm->tensor().size(), 0.0);
  wm->tensor().data()[(F + 0) * F + 0] = 1.0;  // (x.c)[0] -> col 0
  wm->tensor().data()[(F + 1) * F + 1] = 1.0;  // (x.c)[1] -> col 1
  ConditioningContext ones{Tensor::row({1.0, 1.0}), std::nullopt};
  Tensor my = mul_u.condition(x, ones, 2);
  CHECK(my.at({0, 0}) == 1.0);
  CHECK(my.at({0, 1}) == 2.0);

  // Dual forms require the second context feature.
  CrnUnit dual_u(store, "dual", {2, 1, GForm::average_pool, HForm::dual_multiplicative}, F);
  CHECK_THROWS_AS(dual_u.condition(x, ctx, 2), ConfigError);
  ConditioningContext both{Tensor::row({1.0, 1.0}), Tensor::row({0.0, 0.0})};
  CHECK_NOTHROW(dual_u.condition(x, both, 2));

  // Context width must match the feature width.
  ConditioningContext narrow{Tensor::row({1.0}), std::nullopt};
  CHECK_THROWS_AS(add_u.condition(x, narrow, 2), DimensionError);
}

TEST_CASE("pair relation matches a brute-force trace") {
  // One pair drawn from three objects with t = 1: the unit's only output is
  // h(mean of the drawn pair, c), reproduced here from the raw weights.
  ParameterStore store(21);
  const std::size_t F = 3;
  CrnUnit u(store, "bf", {2, 1, GForm::average_pool, HForm::additive}, F);
  Rng rng(77);
  auto objs = make_objects(3, 1, F, rng);
  ConditioningContext ctx{Tensor::row({0.3, -0.1, 0.5}), std::nullopt};

  Rng plan_rng(123);
  SubsetPlan plan = u.plan(3, plan_rng);
  REQUIRE(plan.draws.size() == 1);
  REQUIRE(plan.draws[0].size() == 1);
  const auto& pair = plan.draws[0][0];
  REQUIRE(pair.size() == 2);

  auto out = u.forward_with_plan(objs, ctx, plan);
  REQUIRE(out.size() == 1);

  const Tensor& W = store.find("bf.k2.h")->tensor();
  for (std::size_t col = 0; col < F; ++col) {
    double z = 0.0;
    for (std::size_t j = 0; j < F; ++j) {
      const double g =
          0.5 * (objs[static_cast<std::size_t>(pair[0])].at({0, j}) +
                 objs[static_cast<std::size_t>(pair[1])].at({0, j}));
      z += g * W.at({j, col});
      z += ctx.c1.at({j}) * W.at({F + j, col});
    }
    const double expect = z > 0.0 ? z : std::expm1(z);
    CHECK(out[0].at({0, col}) == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("forward is deterministic for a fixed seed and plan-permutation invariant") {
  ParameterStore store(31);
  CrnUnit u(store, "det", {3, 2, GForm::average_pool, HForm::multiplicative}, 4);
  Rng data_rng(8);
  auto objs = make_objects(6, 2, 4, data_rng);
  ConditioningContext ctx{Tensor::row({0.2, 0.1, -0.3, 0.4}), std::nullopt};

  Rng r1(55), r2(55);
  auto out1 = u.forward(objs, ctx, r1);
  auto out2 = u.forward(objs, ctx, r2);
  REQUIRE(out1.size() == out2.size());
  for (std::size_t i = 0; i < out1.size(); ++i) CHECK(same_tensor(out1[i], out2[i]));

  // Reversing the index order inside each drawn subset leaves the
  // average-pooled relations untouched.
  Rng r3(55);
  SubsetPlan plan = u.plan(6, r3);
  SubsetPlan reversed = plan;
  for (auto& row : reversed.draws) {
    for (auto& s : row) std::reverse(s.begin(), s.end());
  }
  auto a = u.forward_with_plan(objs, ctx, plan);
  auto b = u.forward_with_plan(objs, ctx, reversed);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_tensor(a[i], b[i]));
}

TEST_CASE("gradients reach inputs, context, and per-size weights") {
  ParameterStore store(41);
  CrnUnit u(store, "grad", {3, 2, GForm::average_pool, HForm::multiplicative}, 4);
  Rng rng(9);
  auto objs = make_objects(4, 2, 4, rng);
  for (Tensor& o : objs) o.set_requires_grad(true);
  Tensor c = Tensor::row({0.5, -0.2, 0.3, 0.1}).set_requires_grad(true);
  ConditioningContext ctx{c, std::nullopt};

  Rng plan_rng(9);
  SubsetPlan plan = u.plan(4, plan_rng);
  std::set<int> drawn;
  for (const auto& row : plan.draws) {
    for (const auto& s : row) drawn.insert(s.begin(), s.end());
  }

  Tape tape;
  auto out = u.forward_with_plan(objs, ctx, plan);
  std::vector<Tensor> flat;
  for (const Tensor& o : out) flat.push_back(mean_pool(o, 0));
  Tensor loss = mse(concat_cols(flat), Tensor({4 * flat.size()}));
  tape.backward(loss);

  CHECK(c.has_grad());
  bool ctx_moves = false;
  for (double g : c.grad()) ctx_moves = ctx_moves || g != 0.0;
  CHECK(ctx_moves);
  CHECK(store.find("grad.k2.h")->tensor().has_grad());
  CHECK(store.find("grad.k3.h")->tensor().has_grad());
  for (int i = 0; i < 4; ++i) {
    // Exactly the objects in some drawn subset receive gradient.
    CHECK(objs[static_cast<std::size_t>(i)].has_grad() == (drawn.count(i) != 0));
  }
}
