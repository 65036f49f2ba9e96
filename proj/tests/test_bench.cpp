#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "crnkit/bench.hpp"
#include "crnkit/hcrn.hpp"
#include "crnkit/nn.hpp"
#include "crnkit/rng.hpp"

using namespace crnkit;

TEST_CASE("unit cost formula frozen example") {
  // t=2, k_max=3, K=1, F=2: g = (2/2)*3*2*1*2 = 12, h = (4*2+2)*2*1*4 = 80.
  CrnCost c = cost_crn(2, 3, 1, 2);
  CHECK(c.g == 12.0);
  CHECK(c.h == 80.0);
  CHECK(c.total() == 92.0);

  // k_max = 2 collapses the g term to t*K*F.
  for (int t : {1, 2, 5}) {
    for (int F : {2, 8}) {
      CrnCost pair = cost_crn(t, 2, 3, F);
      CHECK(pair.g == static_cast<double>(t) * 3.0 * F);
      CHECK(pair.h == static_cast<double>(4 * t + 2) * 3.0 * F * F);
    }
  }

  // F scaling: the g term is linear in F, the h term quadratic.
  CrnCost f1 = cost_crn(2, 5, 2, 16);
  CrnCost f2 = cost_crn(2, 5, 2, 32);
  CHECK(f2.g == 2.0 * f1.g);
  CHECK(f2.h == 4.0 * f1.h);

  CHECK_THROWS_AS(cost_crn(0, 3, 1, 2), ConfigError);
  CHECK_THROWS_AS(cost_crn(2, 0, 1, 2), ConfigError);
}

TEST_CASE("stack cost sums the per-level units") {
  HcrnCost two = cost_hcrn(Levels::two, 8, 16, 0, 0, 2, 4);
  REQUIRE(two.per_level.size() >= 2);
  double g_sum = 0.0, h_sum = 0.0;
  for (const auto& lvl : two.per_level) {
    g_sum += lvl.cost.g;
    h_sum += lvl.cost.h;
  }
  CHECK(two.total.g == g_sum);
  CHECK(two.total.h == h_sum);

  // The clip level runs once per clip: its cost carries a factor of N
  // relative to a single unit pair at n = T.
  CrnCost clip_once = cost_crn(2, 15, 1, 4);    // first unit, n = 16
  CrnCost clip_second = cost_crn(2, 13, 1, 4);  // second unit, n = 13 ceiling
  bool found = false;
  for (const auto& lvl : two.per_level) {
    if (lvl.cost.g == 8.0 * (clip_once.g + clip_second.g)) found = true;
  }
  CHECK(found);

  HcrnCost three = cost_hcrn(Levels::three, 24, 16, 4, 6, 2, 4);
  CHECK(three.total.total() < cost_hcrn(Levels::two, 24, 16, 0, 0, 2, 4).total.total());
}

TEST_CASE("leading-order forms and the regrouping drop agree") {
  // 2-level: g = 2(T+N)LF, h = 20LF^2; 3-level: g = 2(T+N/P+P)LF, h = 30LF^2.
  const int N = 24, T = 16, P = 4, F = 8;
  const double L = static_cast<double>(N) * T;
  CHECK(leading_g(Levels::two, N, T, 0, F) == 2.0 * (T + N) * L * F);
  CHECK(leading_g(Levels::three, N, T, P, F) == 2.0 * (T + N / P + P) * L * F);
  CHECK(leading_h(Levels::two, N, T, F) == 20.0 * L * F * F);
  CHECK(leading_h(Levels::three, N, T, F) == 30.0 * L * F * F);

  // The drop identity holds exactly across a parameter grid.
  int points = 0;
  for (int n : {12, 16, 24, 32, 48}) {
    for (int p : {2, 4}) {
      if (n % p != 0) continue;
      for (int t_frames : {8, 16}) {
        for (int f : {4, 16}) {
          const double drop = leading_g_drop(n, t_frames, p, f);
          const double diff = leading_g(Levels::two, n, t_frames, 0, f) -
                              leading_g(Levels::three, n, t_frames, p, f);
          CHECK(drop == diff);
          const double ll = static_cast<double>(n) * t_frames;
          CHECK(drop == 2.0 * (n - n / p - p) * ll * f);
          ++points;
        }
      }
    }
  }
  CHECK(points >= 10);
}

TEST_CASE("mirrored forward matches the autodiff model digit for digit") {
  ModelConfig cfg;
  cfg.task = AnswerKind::open_ended;
  cfg.answer_space = 4;
  cfg.d = 4;
  cfg.visual.N = 5;
  cfg.visual.T = 5;
  ParameterStore store(61);
  HcrnModel model(store, cfg);
  LeanModel lean(store, cfg);

  LeanInputs raw = synth_inputs(cfg, 7);
  SampleInputs sample = to_sample_inputs(raw, cfg);
  auto plans = lean.draw_plans(19);
  LeanResult fast = lean.forward_with_plans(raw, plans);

  Rng rng(19);
  Prediction slow = model.forward(sample, rng);
  REQUIRE(fast.probs.size() == 4);
  REQUIRE(slow.probs.size() == 4);
  double worst = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    worst = std::max(worst, std::abs(fast.probs[i] - slow.probs.data()[i]));
  }
  CHECK(worst <= 1e-12);
  CHECK(fast.macs > 0);

  // 3-level mirror against the 3-level autodiff stack.
  ModelConfig cfg3 = cfg;
  cfg3.visual.levels = Levels::three;
  cfg3.visual.N = 25;
  cfg3.visual.P = 5;
  cfg3.visual.Q = 5;
  ParameterStore store3(62);
  HcrnModel model3(store3, cfg3);
  LeanModel lean3(store3, cfg3);
  LeanInputs raw3 = synth_inputs(cfg3, 8);
  SampleInputs sample3 = to_sample_inputs(raw3, cfg3);
  auto plans3 = lean3.draw_plans(23);
  LeanResult fast3 = lean3.forward_with_plans(raw3, plans3);
  Rng rng3(23);
  Prediction slow3 = model3.forward(sample3, rng3);
  double worst3 = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    worst3 = std::max(worst3, std::abs(fast3.probs[i] - slow3.probs.data()[i]));
  }
  CHECK(worst3 <= 1e-12);
}

TEST_CASE("counted unit cost lands within the analytic band") {
  const std::uint64_t macs = measure_crn_unit_macs(2, 3, 1, 32, 5);
  const double analytic = cost_crn(2, 3, 1, 32).total();
  const double ratio = static_cast<double>(macs) / analytic;
  CHECK(ratio > 0.8);
  CHECK(ratio < 1.2);
}

TEST_CASE("measurement runs are deterministic in their MAC counts") {
  BenchConfig cfg;
  cfg.config_id = "unit_test";
  cfg.levels = Levels::two;
  cfg.N = 5;
  cfg.T = 5;
  cfg.F = 4;
  cfg.repeats = 3;
  cfg.seed = 31;
  CostReport a = measure(cfg);
  CostReport b = measure(cfg);
  CHECK(a.macs == b.macs);
  CHECK(a.macs > 0);
  CHECK(a.analytic.total.total() == b.analytic.total.total());
  CHECK(a.wall_ms_median >= 0.0);
  CHECK(a.wall_ms_iqr >= 0.0);

  BenchConfig thin = cfg;
  thin.repeats = 2;
  CHECK_THROWS_AS(measure(thin), ConfigError);

  BenchConfig mismatched = cfg;
  mismatched.repeats = 5;
  CHECK_THROWS_AS(measure_pair(cfg, mismatched), ConfigError);
}

TEST_CASE("csv rows carry the full report") {
  std::ostringstream os;
  write_csv_header(os);
  CHECK(os.str() ==
        "config_id,levels,N,T,P,Q,F,analytic_g,analytic_h,macs,wall_ms_median,wall_ms_iqr\n");

  BenchConfig cfg;
  cfg.config_id = "L2_N5_T5_F4";
  cfg.levels = Levels::two;
  cfg.N = 5;
  cfg.T = 5;
  cfg.F = 4;
  cfg.repeats = 3;
  cfg.seed = 3;
  CostReport report = measure(cfg);
  std::ostringstream row;
  write_csv_row(row, report);
  const std::string line = row.str();
  CHECK(line.substr(0, 12) == "L2_N5_T5_F4,");
  CHECK(std::count(line.begin(), line.end(), ',') == 11);
  CHECK(line.back() == '\n');

  CostReport three = report;
  three.config.config_id = "L3";
  three.config.levels = Levels::three;
  three.macs = report.macs / 2;
  const std::string summary = depth_comparison_line(report, three);
  CHECK(summary.find("3-level vs 2-level") != std::string::npos);
  CHECK(summary.find("macs") != std::string::npos);
}
