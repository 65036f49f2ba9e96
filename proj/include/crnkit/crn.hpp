#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crnkit/nn.hpp"
#include "crnkit/rng.hpp"
#include "crnkit/tensor.hpp"

namespace crnkit {

enum class GForm { average_pool, concat };

// Conditioning variants. Single-condition forms take one context feature;
// dual forms take two (question plus answer choice). The sequential forms
// run a BiLSTM over the fused rows and max-pool its hidden states, yielding
// a single 1 x F object; every other form preserves the K x F object shape.
enum class HForm {
  additive,
  multiplicative,
  sequential,
  dual_additive,
  dual_multiplicative,
  dual_sequential,
};

bool hform_is_dual(HForm f);
bool hform_is_sequential(HForm f);
std::string hform_name(HForm f);
HForm hform_from_name(const std::string& name);
// Fused input width as a multiple of F ([x], [x.c], [c] style blocks).
std::size_t hform_blocks(HForm f);

struct ConditioningContext {
  Tensor c1;
  std::optional<Tensor> c2;
};

struct CrnConfig {
  int k_max = 0;
  int t = 2;
  GForm g = GForm::average_pool;
  HForm h = HForm::additive;
};

// t index subsets of size k from [0, n), each sorted ascending, drawn
// independently (duplicates across draws allowed, not within one).
std::vector<std::vector<int>> sample_subsets(int n, int k, int t, Rng& rng);

// Feasibility checks shared by sample_subsets and crn_forward.
void check_sampling(int n, int k_max, int t);

// Aggregate a subset of K x F objects: average_pool keeps K x F, concat
// yields K x (kF) for the per-k projection to consume.
Tensor g_aggregate(std::span<const Tensor> subset, GForm form);

// All subset draws for one crn_forward call: plan[i] holds the draws for
// subset size k = k_begin + i.
struct SubsetPlan {
  int n = 0;
  int k_begin = 2;
  std::vector<std::vector<std::vector<int>>> draws;
};

// Draw the full plan for one unit call under the shared feasibility rules:
// k_max == 1 samples single objects, n == 2 takes the whole pair once,
// otherwise one row of t subsets per k in [2, k_max].
SubsetPlan make_subset_plan(int n, int k_max, int t, Rng& rng);

// Relational unit over an input array of same-shape K x F objects. Output
// array length is k_max - 1 (one relation set per subset size 2..k_max),
// with two special cases: n = 2 emits the single full-set relation, and
// k_max = 1 is the no-relation ablation (t single-object draws, g handed
// through untouched).
class CrnUnit {
 public:
  CrnUnit(ParameterStore& store, std::string prefix, CrnConfig config, int feature_width);

  const CrnConfig& config() const { return cfg_; }
  int feature_width() const { return width_; }

  // Output length for an input array of n objects.
  int output_len(int n) const;

  SubsetPlan plan(int n, Rng& rng) const;
  std::vector<Tensor> forward(std::span<const Tensor> objects, const ConditioningContext& ctx,
                              Rng& rng) const;
  std::vector<Tensor> forward_with_plan(std::span<const Tensor> objects,
                                        const ConditioningContext& ctx,
                                        const SubsetPlan& plan) const;

  // Conditioning map h^k applied to one aggregated object (public so the
  // per-form math is testable in isolation). k selects the per-k weights.
  Tensor condition(const Tensor& aggregated, const ConditioningContext& ctx, int k) const;

 private:
  void validate_ctx(const ConditioningContext& ctx) const;
  Tensor fuse(const Tensor& x, const ConditioningContext& ctx) const;
  std::string key(int k, const char* what) const;

  ParameterStore* store_;
  std::string prefix_;
  CrnConfig cfg_;
  int width_;
  std::vector<Tensor> h_weights_;              // per k, empty for sequential forms
  std::vector<BilstmParams> h_bilstm_;         // per k, sequential forms only
  std::vector<Tensor> g_proj_;                 // per k, concat g only
};

}  // namespace crnkit
