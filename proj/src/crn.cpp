#include "crnkit/crn.hpp"

#include <algorithm>
#include <cstddef>
#include <limits>
#include <utility>

#include "crnkit/errors.hpp"

namespace crnkit {
namespace {

constexpr std::uint64_t kBinomCap = std::numeric_limits<std::uint64_t>::max() / 2;

// C(n,k) saturated at cap so feasibility checks never overflow.
std::uint64_t binom_capped(int n, int k, std::uint64_t cap) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t c = 1;
  for (int i = 1; i <= k; ++i) {
    const auto num = static_cast<std::uint64_t>(n - k + i);
    if (c > cap / num) return cap;
    c = c * num / static_cast<std::uint64_t>(i);  // exact: c is C(n-k+i, i) after this step
    if (c >= cap) return cap;
  }
  return c;
}

std::vector<int> draw_sorted_subset(int n, int k, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int j = 0; j < k; ++j) {
    const int pick = j + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - j)));
    std::swap(idx[static_cast<std::size_t>(j)], idx[static_cast<std::size_t>(pick)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

bool hform_is_dual(HForm f) {
  return f == HForm::dual_additive || f == HForm::dual_multiplicative ||
         f == HForm::dual_sequential;
}

bool hform_is_sequential(HForm f) {
  return f == HForm::sequential || f == HForm::dual_sequential;
}

std::string hform_name(HForm f) {
  switch (f) {
    case HForm::additive: return "additive";
    case HForm::multiplicative: return "multiplicative";
    case HForm::sequential: return "sequential";
    case HForm::dual_additive: return "dual-additive";
    case HForm::dual_multiplicative: return "dual-multiplicative";
    case HForm::dual_sequential: return "dual-sequential";
  }
  throw ConfigError("unknown conditioning form");
}

HForm hform_from_name(const std::string& name) {
  if (name == "additive") return HForm::additive;
  if (name == "multiplicative") return HForm::multiplicative;
  if (name == "sequential") return HForm::sequential;
  if (name == "dual-additive") return HForm::dual_additive;
  if (name == "dual-multiplicative") return HForm::dual_multiplicative;
  if (name == "dual-sequential") return HForm::dual_sequential;
  throw ConfigError("unknown conditioning form: " + name);
}

std::size_t hform_blocks(HForm f) {
  switch (f) {
    case HForm::additive: return 2;
    case HForm::multiplicative:
    case HForm::sequential:
    case HForm::dual_additive: return 3;
    case HForm::dual_multiplicative:
    case HForm::dual_sequential: return 5;
  }
  throw ConfigError("unknown conditioning form");
}

void check_sampling(int n, int k_max, int t) {
  if (k_max < 1) throw ConfigError("k_max must be >= 1, got " + std::to_string(k_max));
  if (t < 1) throw ConfigError("t must be >= 1, got " + std::to_string(t));
  if (n < 1) throw ContractError("need at least one input object, got " + std::to_string(n));
  if (k_max == 1) return;  // no-relation mode: single-object draws work for any n >= 1
  if (n == 2) return;      // full-set special case, t forced to 1
  if (k_max >= n) {
    throw ConfigError("k_max must be < n, got k_max=" + std::to_string(k_max) +
                      " with n=" + std::to_string(n));
  }
  for (int k = 2; k <= k_max; ++k) {
    if (binom_capped(n, k, kBinomCap) <= static_cast<std::uint64_t>(t)) {
      throw SamplingError("cannot draw t=" + std::to_string(t) + " subsets of size " +
                          std::to_string(k) + " from n=" + std::to_string(n) +
                          ": t < C(n,k) required");
    }
  }
}

std::vector<std::vector<int>> sample_subsets(int n, int k, int t, Rng& rng) {
  if (k < 1 || k > n) {
    throw ContractError("subset size k=" + std::to_string(k) + " out of range for n=" +
                        std::to_string(n));
  }
  if (t < 1) throw ConfigError("t must be >= 1, got " + std::to_string(t));
  if (binom_capped(n, k, kBinomCap) <= static_cast<std::uint64_t>(t)) {
    throw SamplingError("cannot draw t=" + std::to_string(t) + " subsets of size " +
                        std::to_string(k) + " from n=" + std::to_string(n) +
                        ": t < C(n,k) required");
  }
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) out.push_back(draw_sorted_subset(n, k, rng));
  return out;
}

Tensor g_aggregate(std::span<const Tensor> subset, GForm form) {
  if (subset.empty()) throw ContractError("g_aggregate needs a non-empty subset");
  for (const Tensor& obj : subset) {
    if (obj.shape() != subset.front().shape()) {
      throw DimensionError("g_aggregate inputs must share one object shape");
    }
  }
  if (form == GForm::average_pool) return mean_of(subset);
  return concat_cols(subset);
}

CrnUnit::CrnUnit(ParameterStore& store, std::string prefix, CrnConfig config, int feature_width)
    : store_(&store), prefix_(std::move(prefix)), cfg_(config), width_(feature_width) {
  if (width_ < 1) throw ConfigError("feature width must be positive");
  if (cfg_.k_max < 1) throw ConfigError("k_max must be >= 1, got " + std::to_string(cfg_.k_max));
  if (cfg_.t < 1) throw ConfigError("t must be >= 1, got " + std::to_string(cfg_.t));
  const auto f = static_cast<std::size_t>(width_);
  const std::size_t fused = hform_blocks(cfg_.h) * f;
  const int k_begin = cfg_.k_max == 1 ? 1 : 2;
  for (int k = k_begin; k <= cfg_.k_max; ++k) {
    if (hform_is_sequential(cfg_.h)) {
      h_bilstm_.push_back(make_bilstm_params(*store_, key(k, "h"), fused, f));
    } else {
      h_weights_.push_back(store_->get_or_create(key(k, "h"), {fused, f}).tensor());
    }
    if (cfg_.g == GForm::concat && k >= 2) {
      g_proj_.push_back(
          store_->get_or_create(key(k, "gproj"), {static_cast<std::size_t>(k) * f, f}).tensor());
    }
  }
}

int CrnUnit::output_len(int n) const {
  check_sampling(n, cfg_.k_max, cfg_.t);
  if (cfg_.k_max == 1 || n == 2) return 1;
  return cfg_.k_max - 1;
}

SubsetPlan make_subset_plan(int n, int k_max, int t, Rng& rng) {
  check_sampling(n, k_max, t);
  SubsetPlan p;
  p.n = n;
  if (k_max == 1) {
    p.k_begin = 1;
    std::vector<std::vector<int>> draws;
    draws.reserve(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) {
      draws.push_back({static_cast<int>(rng.below(static_cast<std::uint64_t>(n)))});
    }
    p.draws.push_back(std::move(draws));
    return p;
  }
  p.k_begin = 2;
  if (n == 2) {
    p.draws.push_back({{0, 1}});
    return p;
  }
  for (int k = 2; k <= k_max; ++k) p.draws.push_back(sample_subsets(n, k, t, rng));
  return p;
}

SubsetPlan CrnUnit::plan(int n, Rng& rng) const {
  return make_subset_plan(n, cfg_.k_max, cfg_.t, rng);
}

std::vector<Tensor> CrnUnit::forward(std::span<const Tensor> objects,
                                     const ConditioningContext& ctx, Rng& rng) const {
  return forward_with_plan(objects, ctx, plan(static_cast<int>(objects.size()), rng));
}

std::vector<Tensor> CrnUnit::forward_with_plan(std::span<const Tensor> objects,
                                               const ConditioningContext& ctx,
                                               const SubsetPlan& plan) const {
  validate_ctx(ctx);
  const int n = static_cast<int>(objects.size());
  if (n < 1) throw ContractError("need at least one input object");
  if (n != plan.n) throw ContractError("subset plan was drawn for a different object count");
  const int k_begin = cfg_.k_max == 1 ? 1 : 2;
  const std::size_t want =
      (cfg_.k_max == 1 || n == 2) ? 1 : static_cast<std::size_t>(cfg_.k_max - 1);
  if (plan.k_begin != k_begin || plan.draws.size() != want) {
    throw ContractError("subset plan does not match this unit's configuration");
  }
  const Shape& obj_shape = objects.front().shape();
  if (obj_shape.size() != 2 || objects.front().cols() != static_cast<std::size_t>(width_)) {
    throw DimensionError("objects must be K x " + std::to_string(width_) + " tensors");
  }
  for (const Tensor& obj : objects) {
    if (obj.shape() != obj_shape) throw DimensionError("input objects must share one shape");
  }

  std::vector<Tensor> relations;
  relations.reserve(plan.draws.size());
  std::vector<Tensor> gathered;
  std::vector<Tensor> conditioned;
  for (std::size_t i = 0; i < plan.draws.size(); ++i) {
    const int k = plan.k_begin + static_cast<int>(i);
    conditioned.clear();
    conditioned.reserve(plan.draws[i].size());
    for (const std::vector<int>& subset : plan.draws[i]) {
      gathered.clear();
      gathered.reserve(subset.size());
      for (int idx : subset) {
        if (idx < 0 || idx >= n) throw IndexError("subset index out of range");
        gathered.push_back(objects[static_cast<std::size_t>(idx)]);
      }
      Tensor g_out;
      if (cfg_.k_max == 1) {
        g_out = gathered.front();  // no-relation mode hands the object through
      } else if (cfg_.g == GForm::average_pool) {
        g_out = g_aggregate(gathered, GForm::average_pool);
      } else {
        g_out = linear(g_aggregate(gathered, GForm::concat), g_proj_[i]);
      }
      conditioned.push_back(condition(g_out, ctx, k));
    }
    relations.push_back(mean_of(conditioned));
  }
  return relations;
}

Tensor CrnUnit::condition(const Tensor& aggregated, const ConditioningContext& ctx, int k) const {
  validate_ctx(ctx);
  const int k_begin = cfg_.k_max == 1 ? 1 : 2;
  if (k < k_begin || k > cfg_.k_max) {
    throw IndexError("no conditioning weights for k=" + std::to_string(k));
  }
  const auto slot = static_cast<std::size_t>(k - k_begin);
  const Tensor fused = fuse(aggregated, ctx);
  if (hform_is_sequential(cfg_.h)) {
    const BilstmOut enc = bilstm_encode(fused, h_bilstm_[slot]);
    return reshape(max_pool(enc.hiddens, 0), {1, static_cast<std::size_t>(width_)});
  }
  return elu(linear(fused, h_weights_[slot]));
}

void CrnUnit::validate_ctx(const ConditioningContext& ctx) const {
  const auto f = static_cast<std::size_t>(width_);
  if (!ctx.c1.defined() || ctx.c1.rank() != 1 || ctx.c1.cols() != f) {
    throw DimensionError("conditioning feature must be a length-" + std::to_string(width_) +
                         " vector");
  }
  if (hform_is_dual(cfg_.h)) {
    if (!ctx.c2.has_value() || !ctx.c2->defined()) {
      throw ConfigError("dual conditioning form needs a second context feature");
    }
    if (ctx.c2->rank() != 1 || ctx.c2->cols() != f) {
      throw DimensionError("second conditioning feature must be a length-" +
                           std::to_string(width_) + " vector");
    }
  } else if (ctx.c2.has_value()) {
    throw ConfigError("single conditioning form takes one context feature");
  }
}

Tensor CrnUnit::fuse(const Tensor& x, const ConditioningContext& ctx) const {
  const std::size_t rows = x.rows();
  const Tensor c1 = broadcast_rows(ctx.c1, rows);
  switch (cfg_.h) {
    case HForm::additive: {
      const Tensor parts[] = {x, c1};
      return concat_cols(parts);
    }
    case HForm::multiplicative:
    case HForm::sequential: {
      const Tensor parts[] = {x, hadamard(x, ctx.c1), c1};
      return concat_cols(parts);
    }
    case HForm::dual_additive: {
      const Tensor c2 = broadcast_rows(*ctx.c2, rows);
      const Tensor parts[] = {x, c1, c2};
      return concat_cols(parts);
    }
    case HForm::dual_multiplicative:
    case HForm::dual_sequential: {
      const Tensor c2 = broadcast_rows(*ctx.c2, rows);
      const Tensor parts[] = {x, hadamard(x, ctx.c1), hadamard(x, *ctx.c2), c1, c2};
      return concat_cols(parts);
    }
  }
  throw ConfigError("unknown conditioning form");
}

std::string CrnUnit::key(int k, const char* what) const {
  return prefix_ + ".k" + std::to_string(k) + "." + what;
}

}  // namespace crnkit
