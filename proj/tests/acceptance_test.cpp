// End-to-end acceptance gate. Each criterion prints exactly one PASS/FAIL
// line with its key measurements and elapsed time; the process exits with
// the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crnkit/bench.hpp"
#include "crnkit/config.hpp"
#include "crnkit/crn.hpp"
#include "crnkit/data.hpp"
#include "crnkit/hcrn.hpp"
#include "crnkit/nn.hpp"
#include "crnkit/rng.hpp"
#include "crnkit/tensor.hpp"
#include "crnkit/train.hpp"

using namespace crnkit;

namespace {

int g_failures = 0;

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

void report(int index, const std::string& label, bool pass, const std::string& detail,
            double seconds, double budget_s) {
  const bool in_budget = budget_s <= 0.0 || seconds <= budget_s;
  const bool ok = pass && in_budget;
  if (!ok) ++g_failures;
  std::ostringstream os;
  os << "criterion " << index << " (" << label << "): " << (ok ? "PASS" : "FAIL");
  if (!detail.empty()) os << " " << detail;
  os << " [" << std::fixed << std::setprecision(1) << seconds << "s";
  if (budget_s > 0.0 && !in_budget) os << ", over the " << std::setprecision(0) << budget_s
                                       << "s budget";
  os << "]";
  std::puts(os.str().c_str());
  std::fflush(stdout);
}

Tensor rand_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 2.0 * rng.uniform01() - 1.0;
  return t;
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// ---- criterion 1: shape contracts ----------------------------------------

bool shape_contracts(std::string* detail) {
  Rng rng(101);
  bool ok = true;
  // A single unit at the full ceiling emits max(1, n-2) relation sets.
  for (int n : {2, 3, 5, 8, 16}) {
    ParameterStore store(1);
    CrnUnit unit(store, "u", {policy_kmax(0, n), 2, GForm::average_pool, HForm::additive}, 4);
    std::vector<Tensor> objects;
    for (int i = 0; i < n; ++i) objects.push_back(rand_tensor({2, 4}, rng));
    ConditioningContext ctx{rand_tensor({4}, rng), std::nullopt};
    auto out = unit.forward(objects, ctx, rng);
    const int expect = std::max(1, n - 2);
    ok = ok && static_cast<int>(out.size()) == expect;
    for (const Tensor& o : out) ok = ok && o.shape() == Shape{2, 4};
    if (!ok) {
      *detail = "unit over n=" + std::to_string(n) + " emitted " + std::to_string(out.size()) +
                " outputs, expected " + std::to_string(expect);
      return false;
    }
  }
  // Two stacked units shrink the array by four.
  {
    ParameterStore store(2);
    CrnUnit first(store, "a", {15, 2, GForm::average_pool, HForm::additive}, 4);
    CrnUnit second(store, "b", {13, 2, GForm::average_pool, HForm::additive}, 4);
    std::vector<Tensor> objects;
    for (int i = 0; i < 16; ++i) objects.push_back(rand_tensor({1, 4}, rng));
    ConditioningContext ctx{rand_tensor({4}, rng), std::nullopt};
    auto mid = first.forward(objects, ctx, rng);
    auto top = second.forward(mid, ctx, rng);
    if (mid.size() != 14 || top.size() != 12) {
      *detail = "stacked pair gave " + std::to_string(mid.size()) + " then " +
                std::to_string(top.size()) + " outputs from 16";
      return false;
    }
  }
  // Full 2-level stack: the readout attends over (N-4)(T-4) rows.
  int checked = 0;
  for (int N : {5, 6, 8, 12, 16}) {
    for (int T : {5, 8, 16}) {
      ParameterStore store(3);
      ModelConfig cfg;
      cfg.task = AnswerKind::count;
      cfg.d = 6;
      cfg.visual.N = N;
      cfg.visual.T = T;
      HcrnModel model(store, cfg);
      SampleInputs in;
      std::vector<Tensor> motions;
      for (int i = 0; i < N; ++i) {
        in.clip_frames.push_back(rand_tensor({static_cast<std::size_t>(T), 6}, rng));
        motions.push_back(rand_tensor({6}, rng));
      }
      in.set_clip_motions(std::move(motions));
      in.question = rand_tensor({6}, rng);
      Tensor vm = model.video_motion_summary(in.clip_motions());
      std::vector<Tensor> encoded;
      for (int i = 0; i < N; ++i) {
        encoded.push_back(stack_objects(
            model.clip_encode(in.clip_frames[static_cast<std::size_t>(i)],
                              &in.clip_motions()[static_cast<std::size_t>(i)], in.question,
                              nullptr, rng)));
      }
      Tensor gamma;
      (void)model.attention_readout(model.video_encode(encoded, &vm, in.question, nullptr, rng),
                                    in.question, nullptr, &gamma);
      if (gamma.size() != static_cast<std::size_t>((N - 4) * (T - 4))) {
        *detail = "grid N=" + std::to_string(N) + " T=" + std::to_string(T) + " attended over " +
                  std::to_string(gamma.size()) + " rows";
        return false;
      }
      ++checked;
    }
  }
  *detail = "unit lengths for n in {2,3,5,8,16}, stack shrink 16->12, " +
            std::to_string(checked) + " grid points at (N-4)(T-4)";
  return true;
}

// ---- criterion 2: gradient suite ------------------------------------------

struct GradStats {
  double worst = 0.0;
  int probes = 0;
};

double central_diff(const std::function<double()>& f, Tensor t, std::size_t flat, double eps) {
  double* p = t.data();
  const double saved = p[flat];
  p[flat] = saved + eps;
  const double hi = f();
  p[flat] = saved - eps;
  const double lo = f();
  p[flat] = saved;
  return (hi - lo) / (2.0 * eps);
}

void probe_tensor(const std::function<double()>& objective, const Tensor& t, Rng& pick,
                  GradStats* stats) {
  if (!t.has_grad()) return;
  const std::size_t n = t.size();
  std::vector<std::size_t> flats;
  if (n <= 5) {
    for (std::size_t i = 0; i < n; ++i) flats.push_back(i);
  } else {
    std::set<std::size_t> chosen;
    while (chosen.size() < 5) chosen.insert(pick.below(n));
    flats.assign(chosen.begin(), chosen.end());
  }
  for (std::size_t flat : flats) {
    const double fd = central_diff(objective, t, flat, 1e-6);
    const double an = t.grad()[flat];
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0});
    stats->worst = std::max(stats->worst, rel);
    ++stats->probes;
  }
}

void check_unit_form(HForm form, GradStats* stats) {
  ParameterStore store(7);
  const int n = 5;
  CrnUnit unit(store, "u", {4, 2, GForm::average_pool, form}, 6);
  Rng rng(202);
  std::vector<Tensor> objects;
  for (int i = 0; i < n; ++i) objects.push_back(rand_tensor({2, 6}, rng).set_requires_grad(true));
  ConditioningContext ctx;
  ctx.c1 = rand_tensor({6}, rng).set_requires_grad(true);
  if (hform_is_dual(form)) ctx.c2 = rand_tensor({6}, rng).set_requires_grad(true);
  Rng plan_rng(203);
  SubsetPlan plan = unit.plan(n, plan_rng);
  std::vector<Tensor> targets;
  for (int i = 0; i < unit.output_len(n); ++i) {
    targets.push_back(
        rand_tensor({hform_is_sequential(form) ? 1u : 2u, 6}, rng));
  }

  auto objective = [&]() {
    auto out = unit.forward_with_plan(objects, ctx, plan);
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) total += mse(out[i], targets[i]).value();
    return total;
  };

  {
    Tape tape;
    auto out = unit.forward_with_plan(objects, ctx, plan);
    Tensor loss;
    for (std::size_t i = 0; i < out.size(); ++i) {
      Tensor term = mse(out[i], targets[i]);
      loss = loss.defined() ? add(loss, term) : term;
    }
    tape.backward(loss);
  }

  Rng pick(204);
  for (auto& [name, param] : store.all()) probe_tensor(objective, param->tensor(), pick, stats);
  for (const Tensor& o : objects) probe_tensor(objective, o, pick, stats);
  probe_tensor(objective, ctx.c1, pick, stats);
  if (ctx.c2) probe_tensor(objective, *ctx.c2, pick, stats);
}

void check_readout(GradStats* stats) {
  ParameterStore store(8);
  ModelConfig cfg;
  cfg.task = AnswerKind::count;
  cfg.d = 6;
  cfg.visual.N = 5;
  cfg.visual.T = 5;
  HcrnModel model(store, cfg);
  Rng rng(205);
  std::vector<Tensor> objects{rand_tensor({3, 6}, rng).set_requires_grad(true),
                              rand_tensor({2, 6}, rng).set_requires_grad(true)};
  Tensor q = rand_tensor({6}, rng).set_requires_grad(true);
  Tensor target = rand_tensor({6}, rng);

  auto objective = [&]() { return mse(model.attention_readout(objects, q, nullptr), target).value(); };
  {
    Tape tape;
    tape.backward(mse(model.attention_readout(objects, q, nullptr), target));
  }

  Rng pick(206);
  for (auto& [name, param] : store.all()) {
    if (name.rfind("readout.", 0) == 0) probe_tensor(objective, param->tensor(), pick, stats);
  }
  for (const Tensor& o : objects) probe_tensor(objective, o, pick, stats);
  probe_tensor(objective, q, pick, stats);
}

void check_bilstm(GradStats* stats) {
  ParameterStore store(9);
  BilstmParams p = make_bilstm_params(store, "enc", 3, 4);
  Rng rng(207);
  Tensor seq = rand_tensor({4, 3}, rng).set_requires_grad(true);
  Tensor t_final = rand_tensor({4}, rng);
  Tensor t_hidden = rand_tensor({4, 4}, rng);

  auto objective = [&]() {
    BilstmOut out = bilstm_encode(seq, p);
    return mse(out.final_state, t_final).value() + mse(out.hiddens, t_hidden).value();
  };
  {
    Tape tape;
    BilstmOut out = bilstm_encode(seq, p);
    tape.backward(add(mse(out.final_state, t_final), mse(out.hiddens, t_hidden)));
  }

  Rng pick(208);
  for (auto& [name, param] : store.all()) probe_tensor(objective, param->tensor(), pick, stats);
  probe_tensor(objective, seq, pick, stats);
}

void check_full_model(AnswerKind task, GradStats* stats) {
  ParameterStore store(task == AnswerKind::count ? 10 : task == AnswerKind::open_ended ? 11 : 12);
  ModelConfig cfg;
  cfg.task = task;
  cfg.answer_space = 4;
  cfg.d = 8;
  cfg.visual.N = 5;
  cfg.visual.T = 5;
  HcrnModel model(store, cfg);
  Rng rng(209);
  SampleInputs in;
  std::vector<Tensor> motions;
  for (int i = 0; i < 5; ++i) {
    in.clip_frames.push_back(rand_tensor({5, 8}, rng));
    motions.push_back(rand_tensor({8}, rng));
  }
  in.set_clip_motions(std::move(motions));
  in.question = rand_tensor({8}, rng);
  if (task == AnswerKind::multi_choice) {
    in.choices = {rand_tensor({8}, rng), rand_tensor({8}, rng), rand_tensor({8}, rng)};
  }
  const int label = task == AnswerKind::count ? 3 : 1;
  const std::uint64_t forward_seed = 210;

  auto objective = [&]() {
    Rng fwd(forward_seed);
    return model.loss(model.forward(in, fwd), label).value();
  };
  {
    Tape tape;
    Rng fwd(forward_seed);
    tape.backward(model.loss(model.forward(in, fwd), label));
  }

  Rng pick(211);
  for (auto& [name, param] : store.all()) probe_tensor(objective, param->tensor(), pick, stats);
}

bool gradient_suite(std::string* detail) {
  GradStats stats;
  for (HForm form : {HForm::additive, HForm::multiplicative, HForm::sequential,
                     HForm::dual_additive, HForm::dual_multiplicative, HForm::dual_sequential}) {
    check_unit_form(form, &stats);
  }
  check_readout(&stats);
  check_bilstm(&stats);
  check_full_model(AnswerKind::count, &stats);
  check_full_model(AnswerKind::open_ended, &stats);
  check_full_model(AnswerKind::multi_choice, &stats);
  *detail = "max relative error " + fmt(stats.worst, 8) + " over " + std::to_string(stats.probes) +
            " probes";
  return stats.worst < 1e-4;
}

// ---- criterion 3: counted MACs match the cost model ------------------------

bool mac_fidelity(std::string* detail) {
  double worst = 0.0;
  for (int F : {32, 64}) {
    for (int k_max : {3, 7, 15}) {
      const std::uint64_t macs = measure_crn_unit_macs(2, k_max, 1, F, 17);
      const double analytic = cost_crn(2, k_max, 1, F).total();
      const double ratio = static_cast<double>(macs) / analytic;
      worst = std::max(worst, std::abs(ratio - 1.0));
    }
  }
  *detail = "worst deviation " + fmt(worst * 100.0, 2) + "% of analytic (band 20%)";
  return worst <= 0.20;
}

// ---- criterion 4: the deeper hierarchy is cheaper ---------------------------

bool depth_saves(std::string* detail) {
  BenchConfig two;
  two.config_id = "acc_two";
  two.levels = Levels::two;
  two.N = 24;
  two.T = 16;
  two.F = 6;
  two.t = 2;
  two.repeats = 96;
  two.seed = 1;
  BenchConfig three = two;
  three.config_id = "acc_three";
  three.levels = Levels::three;
  three.P = 4;
  three.Q = 6;
  auto [r2, r3] = measure_pair(two, three);
  const double mac_ratio = static_cast<double>(r2.macs) / static_cast<double>(r3.macs);
  const double wall_ratio = r2.wall_ms_median / r3.wall_ms_median;
  *detail = "macs " + std::to_string(r3.macs) + " < " + std::to_string(r2.macs) + " (x" +
            fmt(mac_ratio, 3) + "), wall " + fmt(r3.wall_ms_median, 3) + "ms vs " +
            fmt(r2.wall_ms_median, 3) + "ms (x" + fmt(wall_ratio, 3) + ", need >= 1.3)";
  return r3.macs < r2.macs && wall_ratio >= 1.3;
}

// ---- criteria 5 and 6: learnability ----------------------------------------

double run_count_mse(std::uint64_t seed, int k_max, int t) {
  RunConfig cfg = default_run_config(data::TaskKind::count);
  cfg.seed = seed;
  cfg.model.k_max = k_max;
  cfg.model.t = t;
  validate_run_config(cfg);
  train::Dataset train_set(data::generate(synth_spec(cfg, false)));
  train::Dataset eval_set(data::generate(synth_spec(cfg, true)));
  ParameterStore store(cfg.seed);
  HcrnModel model(store, model_config(cfg));
  train::FitResult result = train::fit(cfg, store, model, train_set, eval_set);
  return result.final_eval.metric;
}

bool count_learnability(std::string* detail) {
  double full = 0.0, ablated = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    full += run_count_mse(seed, 0, 2);
    ablated += run_count_mse(seed, 1, 1);
  }
  full /= 3.0;
  ablated /= 3.0;
  const double drop = (ablated - full) / ablated;
  *detail = "eval mse " + fmt(full) + " (full) vs " + fmt(ablated) + " (no-relation), " +
            fmt(drop * 100.0, 1) + "% lower (need >= 10%)";
  return full < ablated && drop >= 0.10;
}

double run_choice_accuracy(bool textual_on) {
  RunConfig cfg = default_run_config(data::TaskKind::longform_choice);
  cfg.seed = 1;
  cfg.model.textual_stream = textual_on;
  validate_run_config(cfg);
  train::Dataset train_set(data::generate(synth_spec(cfg, false)));
  train::Dataset eval_set(data::generate(synth_spec(cfg, true)));
  ParameterStore store(cfg.seed);
  HcrnModel model(store, model_config(cfg));
  train::FitResult result = train::fit(cfg, store, model, train_set, eval_set);
  return result.final_eval.metric;
}

bool choice_learnability(std::string* detail) {
  const double acc_full = run_choice_accuracy(true);
  const double acc_blind = run_choice_accuracy(false);
  const double chance = 1.0 / default_run_config(data::TaskKind::longform_choice).data.choices;
  const double gap = std::abs(acc_blind - chance);
  *detail = "textual accuracy " + fmt(acc_full, 3) + " (need >= 0.9), question-only " +
            fmt(acc_blind, 3) + " vs chance " + fmt(chance, 3) + " (gap " + fmt(gap, 3) +
            ", cap 0.05)";
  return acc_full >= 0.90 && gap <= 0.05;
}

// ---- criterion 7: determinism ----------------------------------------------

train::FitResult tiny_fit(std::vector<train::EpochRow>* rows) {
  RunConfig cfg = default_run_config(data::TaskKind::count);
  cfg.seed = 11;
  cfg.data.samples = 64;
  cfg.data.eval_samples = 32;
  cfg.data.N = 5;
  cfg.data.T = 5;
  cfg.model.d = 16;
  cfg.optim.epochs = 2;
  cfg.optim.batch = 16;
  validate_run_config(cfg);
  train::Dataset train_set(data::generate(synth_spec(cfg, false)));
  train::Dataset eval_set(data::generate(synth_spec(cfg, true)));
  ParameterStore store(cfg.seed);
  HcrnModel model(store, model_config(cfg));
  train::FitResult result = train::fit(cfg, store, model, train_set, eval_set);
  *rows = result.epochs;
  return result;
}

bool determinism(std::string* detail) {
  // Identical subset plans from identical seeds.
  Rng r1(77), r2(77);
  SubsetPlan p1 = make_subset_plan(8, 7, 2, r1);
  SubsetPlan p2 = make_subset_plan(8, 7, 2, r2);
  if (p1.draws != p2.draws) {
    *detail = "subset plans diverged for one seed";
    return false;
  }

  // Identical loss trajectories from identical run configs.
  std::vector<train::EpochRow> rows_a, rows_b;
  train::FitResult fa = tiny_fit(&rows_a);
  train::FitResult fb = tiny_fit(&rows_b);
  if (rows_a.size() != rows_b.size()) {
    *detail = "epoch counts diverged";
    return false;
  }
  for (std::size_t i = 0; i < rows_a.size(); ++i) {
    if (rows_a[i].train_loss != rows_b[i].train_loss ||
        rows_a[i].eval_loss != rows_b[i].eval_loss ||
        rows_a[i].eval_metric != rows_b[i].eval_metric) {
      *detail = "loss trajectories diverged at epoch " + std::to_string(i);
      return false;
    }
  }
  if (fa.final_eval.metric != fb.final_eval.metric) {
    *detail = "final metrics diverged";
    return false;
  }

  // Identical MAC counts from identical benchmark configs.
  BenchConfig cfg;
  cfg.config_id = "det";
  cfg.levels = Levels::two;
  cfg.N = 5;
  cfg.T = 5;
  cfg.F = 4;
  cfg.repeats = 3;
  cfg.seed = 13;
  if (measure(cfg).macs != measure(cfg).macs) {
    *detail = "benchmark MAC counts diverged";
    return false;
  }
  *detail = "subset plans, 2-epoch loss trajectories, and benchmark MACs repeat bit for bit";
  return true;
}

bool run(int index, const std::string& label, double budget_s,
         const std::function<bool(std::string*)>& body) {
  const double t0 = now_seconds();
  std::string detail;
  bool pass = false;
  try {
    pass = body(&detail);
  } catch (const std::exception& e) {
    detail = std::string("threw: ") + e.what();
    pass = false;
  }
  report(index, label, pass, detail, now_seconds() - t0, budget_s);
  return pass;
}

}  // namespace

int main() {
  run(1, "shape contracts", 10.0, shape_contracts);
  run(2, "gradient suite", 120.0, gradient_suite);
  run(3, "counted MACs match the cost model", 60.0, mac_fidelity);
  run(4, "deeper hierarchy saves time", 300.0, depth_saves);
  run(5, "relational counting beats the no-relation ablation", 1800.0, count_learnability);
  run(6, "textual stream answers long-form questions", 1200.0, choice_learnability);
  run(7, "bit-exact determinism", 0.0, determinism);
  return g_failures;
}
