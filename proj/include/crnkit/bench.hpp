#pragma once
// Analytic inference-cost model for relation units and their hierarchies, plus
// an instrumented harness: a tape-free mirror of the model forward pass that
// counts multiply-accumulate operations and measures wall time. The mirror
// reproduces the autodiff path's arithmetic exactly, so its MAC counts stand
// in for the full model's cost.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "crnkit/hcrn.hpp"
#include "crnkit/nn.hpp"
#include "crnkit/rng.hpp"

namespace crnkit {

// Leading-order cost of one relation unit, split into the subset-aggregation
// term (g, linear in feature width) and the conditioning term (h, quadratic).
struct CrnCost {
  double g = 0.0;
  double h = 0.0;
  double total() const { return g + h; }
};

// cost_g = (t/2) k_max (k_max-1) K F and cost_h = (4t+2)(k_max-1) K F^2 for a
// unit over objects of K rows by F columns. Constants evaluated as written.
CrnCost cost_crn(int t, int k_max, int K, int F);

struct LevelCost {
  std::string level;
  CrnCost cost;
};

struct HcrnCost {
  std::vector<LevelCost> per_level;
  CrnCost total;
};

// Level-wise sums of cost_crn for the 2- and 3-level short-form stacks, every
// unit at its full ceiling k_max = n-1 and the second unit of each stack at
// n-3. Arrays too short for pair subsets contribute nothing.
HcrnCost cost_hcrn(Levels levels, int N, int T, int P, int Q, int t, int F);

// Closed-form leading-order totals with L = N*T. The g term is 2(T+N)LF for
// the 2-level stack and 2(T+N/P+P)LF for the 3-level one; the h term is
// 20LF^2 vs 30LF^2. Regrouping N clips into P sub-videos drops the g term by
// 2(N-N/P-P)LF.
double leading_g(Levels levels, int N, int T, int P, int F);
double leading_h(Levels levels, int N, int T, int F);
double leading_g_drop(int N, int T, int P, int F);

// One count per scalar multiply-accumulate (or bare accumulate) inside linear
// maps, elementwise products, and pooling sums. Activations, copies, plain
// elementwise adds, and comparisons are free.
struct MacCounter {
  std::uint64_t macs = 0;
};

struct BenchConfig {
  std::string config_id;
  Levels levels = Levels::two;
  int N = 8;
  int T = 16;
  int P = 0;  // 3-level only
  int Q = 0;  // 3-level only
  int F = 8;
  int t = 2;
  int repeats = 5;
  std::uint64_t seed = 1;
};

struct CostReport {
  BenchConfig config;
  HcrnCost analytic;
  std::uint64_t macs = 0;
  double wall_ms_median = 0.0;
  double wall_ms_iqr = 0.0;
};

// Deterministic synthetic inputs for timing runs, kept as flat buffers.
struct LeanInputs {
  std::vector<std::vector<double>> frames;   // N buffers of T*F
  std::vector<std::vector<double>> motions;  // N buffers of F
  std::vector<double> question;              // F
};

LeanInputs synth_inputs(const ModelConfig& config, std::uint64_t seed);
// The same features wrapped as model-ready tensors (for cross-checking the
// mirror against the autodiff forward).
SampleInputs to_sample_inputs(const LeanInputs& in, const ModelConfig& config);

struct LeanResult {
  std::vector<double> probs;
  std::uint64_t macs = 0;
};

namespace lean_detail {
struct Impl;
}

// Tape-free mirror of an open-ended, visual-only, short-form 2- or 3-level
// model. Shares the store's parameter buffers, draws subset plans in the same
// order as the autodiff forward, and reproduces its values digit for digit.
class LeanModel {
 public:
  LeanModel(ParameterStore& store, const ModelConfig& config);
  ~LeanModel();
  LeanModel(LeanModel&&) noexcept;
  LeanModel& operator=(LeanModel&&) noexcept;

  // Every subset plan one forward pass consumes, in consumption order.
  std::vector<SubsetPlan> draw_plans(std::uint64_t plan_seed) const;
  LeanResult forward_with_plans(const LeanInputs& in, const std::vector<SubsetPlan>& plans);
  LeanResult forward(const LeanInputs& in, std::uint64_t plan_seed);

 private:
  lean_detail::Impl* impl_;
};

// MAC count of one standalone unit forward (dual-context multiplicative
// conditioning, average-pool aggregation) over n = k_max+1 objects of K x F.
std::uint64_t measure_crn_unit_macs(int t, int k_max, int K, int F, std::uint64_t seed);

// Timed forward passes of the mirrored model: one warmup, then `repeats`
// measured runs (reporting median and interquartile range) with the MAC count
// asserted identical across runs. Subset plans are drawn once per
// configuration outside the timed window: the cost model prices the unit
// arithmetic, and the unit API takes plans as inputs.
CostReport measure(const BenchConfig& config);

// Timed comparison of two configurations with the repeats interleaved in
// alternating blocks (a-b, then b-a) so slow clock drift lands on both sides
// equally; each side still reports the median and interquartile range of its
// own `repeats` runs. Both configs must ask for the same repeat count.
std::pair<CostReport, CostReport> measure_pair(const BenchConfig& a, const BenchConfig& b);

// CSV columns: config_id, levels, N, T, P, Q, F, analytic_g, analytic_h,
// macs, wall_ms_median, wall_ms_iqr.
void write_csv_header(std::ostream& os);
void write_csv_row(std::ostream& os, const CostReport& report);
std::string depth_comparison_line(const CostReport& two_level, const CostReport& three_level);

}  // namespace crnkit
