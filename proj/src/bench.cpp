#include "crnkit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>
#include <utility>

#include "crnkit/crn.hpp"
#include "crnkit/errors.hpp"

namespace crnkit {

// ---- analytic model ----------------------------------------------------------

CrnCost cost_crn(int t, int k_max, int K, int F) {
  if (t < 1) throw ConfigError("cost_crn: t must be >= 1");
  if (k_max < 2) throw ConfigError("cost_crn: k_max must be >= 2");
  if (K < 1 || F < 1) throw ConfigError("cost_crn: K and F must be >= 1");
  const double td = t, kd = k_max, Kd = K, Fd = F;
  CrnCost c;
  c.g = (td / 2.0) * kd * (kd - 1.0) * Kd * Fd;
  c.h = (4.0 * td + 2.0) * (kd - 1.0) * Kd * Fd * Fd;
  return c;
}

namespace {

void accumulate(CrnCost& into, const CrnCost& part) {
  into.g += part.g;
  into.h += part.h;
}

// Motion unit at k_max = n-1 stacked with a question unit at n-3; terms whose
// ceiling falls below 2 (arrays too short for pair subsets) contribute nothing.
CrnCost stacked_pair_cost(int t, int n, int K, int F) {
  CrnCost total;
  if (n - 1 >= 2) accumulate(total, cost_crn(t, n - 1, K, F));
  if (n - 3 >= 2) accumulate(total, cost_crn(t, n - 3, K, F));
  return total;
}

CrnCost scaled(CrnCost c, double by) {
  c.g *= by;
  c.h *= by;
  return c;
}

}  // namespace

HcrnCost cost_hcrn(Levels levels, int N, int T, int P, int Q, int t, int F) {
  if (N < 1 || T < 5) throw ConfigError("cost model needs N >= 1 and T >= 5");
  HcrnCost out;
  const CrnCost clip = scaled(stacked_pair_cost(t, T, 1, F), static_cast<double>(N));
  out.per_level.push_back({"clip", clip});
  accumulate(out.total, clip);
  switch (levels) {
    case Levels::two: {
      const CrnCost video = stacked_pair_cost(t, N, T - 4, F);
      out.per_level.push_back({"video", video});
      accumulate(out.total, video);
      return out;
    }
    case Levels::three: {
      if (P < 1 || Q < 5 || N != P * Q) {
        throw ConfigError("3-level cost model needs N = P*Q with Q >= 5");
      }
      const CrnCost sub = scaled(stacked_pair_cost(t, Q, T - 4, F), static_cast<double>(P));
      out.per_level.push_back({"sub", sub});
      accumulate(out.total, sub);
      const CrnCost video = stacked_pair_cost(t, P, (Q - 4) * (T - 4), F);
      out.per_level.push_back({"video", video});
      accumulate(out.total, video);
      return out;
    }
    default:
      throw ConfigError("cost model covers the 2- and 3-level hierarchies");
  }
}

double leading_g(Levels levels, int N, int T, int P, int F) {
  const double L = static_cast<double>(N) * T;
  if (levels == Levels::two) return 2.0 * (T + N) * L * F;
  if (levels == Levels::three) {
    if (P < 1 || N % P != 0) throw ConfigError("leading_g: P must divide N");
    return 2.0 * (T + N / P + P) * L * F;
  }
  throw ConfigError("leading terms cover the 2- and 3-level hierarchies");
}

double leading_h(Levels levels, int N, int T, int F) {
  const double L = static_cast<double>(N) * T;
  if (levels == Levels::two) return 20.0 * L * F * F;
  if (levels == Levels::three) return 30.0 * L * F * F;
  throw ConfigError("leading terms cover the 2- and 3-level hierarchies");
}

double leading_g_drop(int N, int T, int P, int F) {
  if (P < 1 || N % P != 0) throw ConfigError("leading_g_drop: P must divide N");
  const double L = static_cast<double>(N) * T;
  return 2.0 * (N - N / P - P) * L * F;
}

// ---- tape-free mirror ---------------------------------------------------------

namespace {

struct Mat {
  double* p = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

// Bump allocator over fixed chunks; chunk buffers never move, so views stay
// valid until the next reset.
class Arena {
 public:
  double* alloc(std::size_t n) {
    if (chunk_ == chunks_.size() || used_ + n > chunks_[chunk_].size()) {
      advance(n);
    }
    double* p = chunks_[chunk_].data() + used_;
    used_ += n;
    return p;
  }
  Mat alloc_mat(std::size_t rows, std::size_t cols) { return Mat{alloc(rows * cols), rows, cols}; }
  void reset() {
    chunk_ = 0;
    used_ = 0;
  }

 private:
  static constexpr std::size_t kChunk = std::size_t{1} << 16;
  void advance(std::size_t need) {
    while (chunk_ < chunks_.size() && chunks_[chunk_].size() - used_ < need) {
      ++chunk_;
      used_ = 0;
    }
    if (chunk_ == chunks_.size()) {
      chunks_.emplace_back(std::max(need, kChunk));
      used_ = 0;
    }
  }
  std::vector<std::vector<double>> chunks_;
  std::size_t chunk_ = 0;
  std::size_t used_ = 0;
};

// Kernels mirror the autodiff ops' loop order so values match digit for digit.

void k_linear(const Mat& x, const Mat& W, const double* b, Mat out, MacCounter& mc) {
  const std::size_t rows = x.rows, in = x.cols, out_w = W.cols;
  for (std::size_t r = 0; r < rows; ++r) {
    double* orow = out.p + r * out_w;
    if (b != nullptr)
      std::memcpy(orow, b, out_w * sizeof(double));
    else
      std::fill(orow, orow + out_w, 0.0);
    const double* xrow = x.p + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double xv = xrow[i];
      const double* wrow = W.p + i * out_w;
      for (std::size_t o = 0; o < out_w; ++o) orow[o] += xv * wrow[o];
    }
  }
  mc.macs += rows * in * out_w + (b != nullptr ? rows * out_w : 0);
}

void k_elu(Mat x) {
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) x.p[i] = x.p[i] > 0.0 ? x.p[i] : std::expm1(x.p[i]);
}

// out = mean over same-shape parts, accumulated in order then scaled.
void k_mean(const Mat* parts, std::size_t m, Mat out, MacCounter& mc) {
  const std::size_t n = out.size();
  std::fill(out.p, out.p + n, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    const double* pp = parts[j].p;
    for (std::size_t i = 0; i < n; ++i) out.p[i] += pp[i];
  }
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < n; ++i) out.p[i] *= inv;
  mc.macs += m * n + n;
}

void k_hadamard_bcast(const Mat& x, const double* v, Mat out, MacCounter& mc) {
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t c = 0; c < x.cols; ++c) out.p[r * x.cols + c] = x.p[r * x.cols + c] * v[c];
  mc.macs += x.size();
}

void k_softmax_vec(const double* x, std::size_t n, double* out, MacCounter& mc) {
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x[i] - mx) / sum;
  mc.macs += 2 * n;
}

enum class LeanForm { additive, multiplicative, dual_multiplicative };

std::size_t lean_blocks(LeanForm f) {
  switch (f) {
    case LeanForm::additive: return 2;
    case LeanForm::multiplicative: return 3;
    case LeanForm::dual_multiplicative: return 5;
  }
  throw ConfigError("unknown mirrored conditioning form");
}

struct LeanCrn {
  int k_max = 0;
  int t = 2;
  LeanForm form = LeanForm::additive;
  std::vector<Mat> W;  // one fused-in x F weight per subset size
};

// One output row of the conditioning transform and its squash: the blocks
// ([x c], [x x*c c], or [x x*c1 x*c2 c1 c2]) feed the weight rows in the same
// order the autodiff path concatenates them, so every product and accumulate
// sees identical values. Callers account the multiply-accumulates. The width
// is a template parameter so the per-weight-row inner loops compile to
// straight-line code at the common feature sizes.
template <int FW>
void k_condition_row_fw(const double* xrow, const double* c1, const double* c2, LeanForm form,
                        const Mat& W, double* orow, std::size_t F) {
  const std::size_t n = FW > 0 ? static_cast<std::size_t>(FW) : F;
  std::fill(orow, orow + n, 0.0);
  const double* wrow = W.p;
  auto axpy = [&](double xv) {
    for (std::size_t o = 0; o < n; ++o) orow[o] += xv * wrow[o];
    wrow += n;
  };
  for (std::size_t i = 0; i < n; ++i) axpy(xrow[i]);
  switch (form) {
    case LeanForm::additive:
      for (std::size_t i = 0; i < n; ++i) axpy(c1[i]);
      break;
    case LeanForm::multiplicative:
      for (std::size_t i = 0; i < n; ++i) axpy(xrow[i] * c1[i]);
      for (std::size_t i = 0; i < n; ++i) axpy(c1[i]);
      break;
    case LeanForm::dual_multiplicative:
      for (std::size_t i = 0; i < n; ++i) axpy(xrow[i] * c1[i]);
      for (std::size_t i = 0; i < n; ++i) axpy(xrow[i] * c2[i]);
      for (std::size_t i = 0; i < n; ++i) axpy(c1[i]);
      for (std::size_t i = 0; i < n; ++i) axpy(c2[i]);
      break;
  }
  for (std::size_t o = 0; o < n; ++o) orow[o] = orow[o] > 0.0 ? orow[o] : std::expm1(orow[o]);
}

using CondRowFn = void (*)(const double*, const double*, const double*, LeanForm, const Mat&,
                           double*, std::size_t);

CondRowFn cond_row_for(std::size_t F) {
  switch (F) {
    case 4: return k_condition_row_fw<4>;
    case 6: return k_condition_row_fw<6>;
    case 8: return k_condition_row_fw<8>;
    case 12: return k_condition_row_fw<12>;
    case 16: return k_condition_row_fw<16>;
    case 24: return k_condition_row_fw<24>;
    case 32: return k_condition_row_fw<32>;
    case 48: return k_condition_row_fw<48>;
    case 64: return k_condition_row_fw<64>;
    default: return k_condition_row_fw<0>;  // runtime width
  }
}

// One subset's relation in a single pass: average the drawn objects
// (accumulated in draw order, then scaled), then condition and squash
// row by row.
void k_relate(const std::vector<Mat>& objects, const std::vector<int>& subset, double* agg_scratch,
              const double* c1, const double* c2, LeanForm form, const Mat& W, int k_max, Mat out,
              MacCounter& mc) {
  const std::size_t rows = out.rows, F = out.cols;
  const double* agg = nullptr;
  if (k_max == 1) {
    agg = objects[static_cast<std::size_t>(subset.front())].p;
  } else {
    const std::size_t n = rows * F;
    std::fill(agg_scratch, agg_scratch + n, 0.0);
    for (int idx : subset) {
      const double* pp = objects[static_cast<std::size_t>(idx)].p;
      for (std::size_t i = 0; i < n; ++i) agg_scratch[i] += pp[i];
    }
    const double inv = 1.0 / static_cast<double>(subset.size());
    for (std::size_t i = 0; i < n; ++i) agg_scratch[i] *= inv;
    mc.macs += subset.size() * n + n;
    agg = agg_scratch;
  }
  const std::size_t blocks = lean_blocks(form);
  const CondRowFn cond_row = cond_row_for(F);
  for (std::size_t r = 0; r < rows; ++r) {
    cond_row(agg + r * F, c1, c2, form, W, out.p + r * F, F);
  }
  mc.macs += rows * blocks * F * F + rows * F * (blocks == 5 ? 2 : blocks == 3 ? 1 : 0);
}

std::vector<Mat> lean_crn_forward(const LeanCrn& unit, const std::vector<Mat>& objects,
                                  const double* c1, const double* c2, const SubsetPlan& plan,
                                  Arena& arena, MacCounter& mc) {
  const std::size_t K = objects.front().rows, F = objects.front().cols;
  std::vector<Mat> out;
  out.reserve(plan.draws.size());
  std::vector<Mat> conditioned;
  conditioned.reserve(plan.draws.empty() ? 0 : plan.draws.front().size());
  double* agg_scratch = unit.k_max == 1 ? nullptr : arena.alloc(K * F);
  for (std::size_t slot = 0; slot < plan.draws.size(); ++slot) {
    conditioned.clear();
    for (const auto& subset : plan.draws[slot]) {
      Mat h = arena.alloc_mat(K, F);
      k_relate(objects, subset, agg_scratch, c1, c2, unit.form, unit.W[slot], unit.k_max, h, mc);
      conditioned.push_back(h);
    }
    Mat pooled = arena.alloc_mat(K, F);
    k_mean(conditioned.data(), conditioned.size(), pooled, mc);
    out.push_back(pooled);
  }
  return out;
}

struct LeanLstm {
  Mat Wx, Wh;
  const double* b = nullptr;
  std::size_t hidden = 0;
};

// Final hidden state over a seq of `steps` rows of width `in`; gate math in
// the same order as the autodiff cell: (x Wx + h Wh) + b, then
// c = f*c + i*g and h = o*tanh(c).
double* lean_lstm_last(const LeanLstm& p, const double* seq, std::size_t steps, std::size_t in,
                       Arena& arena, MacCounter& mc) {
  const std::size_t H = p.hidden;
  double* h = arena.alloc(H);
  double* c = arena.alloc(H);
  std::fill(h, h + H, 0.0);
  std::fill(c, c + H, 0.0);
  Mat gx = arena.alloc_mat(1, 4 * H);
  Mat gh = arena.alloc_mat(1, 4 * H);
  for (std::size_t s = 0; s < steps; ++s) {
    k_linear(Mat{const_cast<double*>(seq + s * in), 1, in}, p.Wx, nullptr, gx, mc);
    k_linear(Mat{h, 1, H}, p.Wh, nullptr, gh, mc);
    for (std::size_t j = 0; j < 4 * H; ++j) gx.p[j] = (gx.p[j] + gh.p[j]) + p.b[j];
    for (std::size_t j = 0; j < H; ++j) {
      const double ig = 1.0 / (1.0 + std::exp(-gx.p[j]));
      const double fg = 1.0 / (1.0 + std::exp(-gx.p[H + j]));
      const double gg = std::tanh(gx.p[2 * H + j]);
      const double og = 1.0 / (1.0 + std::exp(-gx.p[3 * H + j]));
      c[j] = fg * c[j] + ig * gg;
      h[j] = og * std::tanh(c[j]);
    }
    mc.macs += 3 * H;
  }
  return h;
}

Mat fetch(ParameterStore& store, const std::string& name, std::vector<Tensor>& owned) {
  Parameter* p = store.find(name);
  if (!p) throw ContractError("mirror: parameter " + name + " does not exist");
  owned.push_back(p->tensor());
  Tensor& t = owned.back();
  return Mat{t.data(), t.rows(), t.cols()};
}

LeanForm lean_form(HForm f) {
  switch (f) {
    case HForm::additive: return LeanForm::additive;
    case HForm::multiplicative: return LeanForm::multiplicative;
    case HForm::dual_multiplicative: return LeanForm::dual_multiplicative;
    default:
      throw ConfigError("the mirror supports additive and multiplicative conditioning only");
  }
}

LeanCrn load_unit(ParameterStore& store, const std::string& prefix, int n, int policy, int t,
                  HForm form, std::vector<Tensor>& owned) {
  LeanCrn u;
  u.k_max = policy_kmax(policy, n);
  u.t = t;
  u.form = lean_form(form);
  if (u.k_max == 1) throw ConfigError("the mirror supports relational units only");
  for (int k = 2; k <= u.k_max; ++k) {
    u.W.push_back(fetch(store, prefix + ".k" + std::to_string(k) + ".h", owned));
  }
  return u;
}

}  // namespace

namespace lean_detail {

struct Impl {
  ModelConfig cfg;
  std::vector<Tensor> owned;  // keeps parameter buffers alive
  LeanCrn clip_motion, clip_question;
  LeanCrn video_motion, video_question;         // 2-level
  LeanCrn sub_motion, sub_question, top_question;  // 3-level
  LeanCrn top_motion;
  bool has_top_motion = false;
  LeanLstm lstm;
  Mat ro_Wo, ro_Wq, ro_WI, ro_WIp;
  const double *ro_bI = nullptr, *ro_bIp = nullptr;
  Mat dec_Wq, dec_Wo, dec_Wy, head_W;
  const double *dec_bq = nullptr, *dec_bo = nullptr, *dec_by = nullptr, *head_b = nullptr;
  Arena arena;

  // Contiguous (len x F) copy of an object list's rows.
  Mat stack(const std::vector<Mat>& objects) {
    const std::size_t F = objects.front().cols;
    std::size_t rows = 0;
    for (const Mat& o : objects) rows += o.rows;
    Mat out = arena.alloc_mat(rows, F);
    double* dst = out.p;
    for (const Mat& o : objects) {
      std::memcpy(dst, o.p, o.size() * sizeof(double));
      dst += o.size();
    }
    return out;
  }

  std::vector<Mat> run_unit(const LeanCrn& unit, const std::vector<Mat>& objects,
                            const double* c1, const std::vector<SubsetPlan>& plans,
                            std::size_t& cursor, MacCounter& mc) {
    if (cursor >= plans.size()) throw ContractError("mirror ran past its plan list");
    const SubsetPlan& plan = plans[cursor++];
    if (plan.n != static_cast<int>(objects.size())) {
      throw ContractError("mirror plan does not match its object array");
    }
    return lean_crn_forward(unit, objects, c1, nullptr, plan, arena, mc);
  }

  // One clip-stack stage for every clip at once. The clips share the unit's
  // weights, so each slot runs as a single sweep over all (clip, draw) rows
  // before pooling back per clip; the per-row arithmetic is the same as in
  // lean_crn_forward. bases[i] holds clip i's n_objects x F object rows
  // contiguously, ctxs[i] its conditioning vector, stage_plans[i] its plan.
  // out[i] receives the clip's pooled outputs as slot rows. Width-templated
  // like k_condition_row_fw, for the same reason.
  template <int FW>
  void unit_stage_batch_fw(const LeanCrn& unit, std::size_t n_objects, std::size_t F,
                           const std::vector<const double*>& bases,
                           const std::vector<const double*>& ctxs,
                           const std::vector<const SubsetPlan*>& stage_plans,
                           std::vector<Mat>& out, MacCounter& mc) {
    const std::size_t n = FW > 0 ? static_cast<std::size_t>(FW) : F;
    const std::size_t N = bases.size();
    const std::size_t slots = unit.W.size();
    for (std::size_t i = 0; i < N; ++i) {
      if (stage_plans[i]->n != static_cast<int>(n_objects) ||
          stage_plans[i]->draws.size() != slots) {
        throw ContractError("mirror plan does not match its object array");
      }
      out[i] = arena.alloc_mat(slots, n);
    }
    Mat agg = arena.alloc_mat(N * static_cast<std::size_t>(unit.t), n);
    Mat h = arena.alloc_mat(N * static_cast<std::size_t>(unit.t), n);
    const std::size_t blocks = lean_blocks(unit.form);
    const std::size_t prods = blocks == 5 ? 2 : blocks == 3 ? 1 : 0;
    for (std::size_t slot = 0; slot < slots; ++slot) {
      const Mat& W = unit.W[slot];
      const std::size_t draws = stage_plans.front()->draws[slot].size();
      std::uint64_t mean_macs = 0;
      for (std::size_t i = 0; i < N; ++i) {
        const auto& subsets = stage_plans[i]->draws[slot];
        if (subsets.size() != draws) {
          throw ContractError("mirror plan does not match its object array");
        }
        for (std::size_t s = 0; s < draws; ++s) {
          double* arow = agg.p + (i * draws + s) * n;
          const std::vector<int>& subset = subsets[s];
          std::fill(arow, arow + n, 0.0);
          for (int idx : subset) {
            const double* pp = bases[i] + static_cast<std::size_t>(idx) * n;
            for (std::size_t c = 0; c < n; ++c) arow[c] += pp[c];
          }
          const double inv = 1.0 / static_cast<double>(subset.size());
          for (std::size_t c = 0; c < n; ++c) arow[c] *= inv;
          mean_macs += subset.size() * n + n;
          k_condition_row_fw<FW>(arow, ctxs[i], nullptr, unit.form, W,
                                 h.p + (i * draws + s) * n, n);
        }
        double* drow = out[i].p + slot * n;
        std::fill(drow, drow + n, 0.0);
        for (std::size_t s = 0; s < draws; ++s) {
          const double* hrow = h.p + (i * draws + s) * n;
          for (std::size_t c = 0; c < n; ++c) drow[c] += hrow[c];
        }
        const double inv = 1.0 / static_cast<double>(draws);
        for (std::size_t c = 0; c < n; ++c) drow[c] *= inv;
      }
      mc.macs += mean_macs + N * draws * (blocks * n * n + prods * n) + N * (draws * n + n);
    }
  }

  void unit_stage_batch(const LeanCrn& unit, std::size_t n_objects, std::size_t F,
                        const std::vector<const double*>& bases,
                        const std::vector<const double*>& ctxs,
                        const std::vector<const SubsetPlan*>& stage_plans, std::vector<Mat>& out,
                        MacCounter& mc) {
    switch (F) {
      case 4: return unit_stage_batch_fw<4>(unit, n_objects, F, bases, ctxs, stage_plans, out, mc);
      case 6: return unit_stage_batch_fw<6>(unit, n_objects, F, bases, ctxs, stage_plans, out, mc);
      case 8: return unit_stage_batch_fw<8>(unit, n_objects, F, bases, ctxs, stage_plans, out, mc);
      case 12:
        return unit_stage_batch_fw<12>(unit, n_objects, F, bases, ctxs, stage_plans, out, mc);
      case 16:
        return unit_stage_batch_fw<16>(unit, n_objects, F, bases, ctxs, stage_plans, out, mc);
      case 24:
        return unit_stage_batch_fw<24>(unit, n_objects, F, bases, ctxs, stage_plans, out, mc);
      case 32:
        return unit_stage_batch_fw<32>(unit, n_objects, F, bases, ctxs, stage_plans, out, mc);
      case 48:
        return unit_stage_batch_fw<48>(unit, n_objects, F, bases, ctxs, stage_plans, out, mc);
      case 64:
        return unit_stage_batch_fw<64>(unit, n_objects, F, bases, ctxs, stage_plans, out, mc);
      default:
        return unit_stage_batch_fw<0>(unit, n_objects, F, bases, ctxs, stage_plans, out, mc);
    }
  }

  Mat readout(const Mat& o_prime, const double* q, MacCounter& mc) {
    const std::size_t H = o_prime.rows, F = o_prime.cols;
    Mat wo = arena.alloc_mat(H, F);
    k_linear(o_prime, ro_Wo, nullptr, wo, mc);
    Mat wq = arena.alloc_mat(1, F);
    k_linear(Mat{const_cast<double*>(q), 1, F}, ro_Wq, nullptr, wq, mc);
    Mat hq = arena.alloc_mat(H, F);
    k_hadamard_bcast(wo, wq.p, hq, mc);
    Mat fused = arena.alloc_mat(H, 2 * F);
    for (std::size_t r = 0; r < H; ++r) {
      std::memcpy(fused.p + r * 2 * F, wo.p + r * F, F * sizeof(double));
      std::memcpy(fused.p + r * 2 * F + F, hq.p + r * F, F * sizeof(double));
    }
    Mat inner = arena.alloc_mat(H, F);
    k_linear(fused, ro_WI, ro_bI, inner, mc);
    k_elu(inner);
    Mat logits = arena.alloc_mat(H, 1);
    k_linear(inner, ro_WIp, ro_bIp, logits, mc);
    Mat gamma = arena.alloc_mat(1, H);
    k_softmax_vec(logits.p, H, gamma.p, mc);
    Mat pooled = arena.alloc_mat(1, F);
    std::fill(pooled.p, pooled.p + F, 0.0);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < F; ++c) pooled.p[c] += o_prime.p[r * F + c] * gamma.p[r];
    mc.macs += 2 * H * F;  // row scaling plus the pooling sum
    return pooled;
  }

  std::vector<double> decode(const Mat& o, const double* q, MacCounter& mc) {
    const std::size_t F = o.cols;
    Mat wq = arena.alloc_mat(1, F);
    k_linear(Mat{const_cast<double*>(q), 1, F}, dec_Wq, dec_bq, wq, mc);
    Mat fused = arena.alloc_mat(1, 2 * F);
    std::memcpy(fused.p, o.p, F * sizeof(double));
    std::memcpy(fused.p + F, wq.p, F * sizeof(double));
    Mat y = arena.alloc_mat(1, F);
    k_linear(fused, dec_Wo, dec_bo, y, mc);
    k_elu(y);
    Mat yp = arena.alloc_mat(1, F);
    k_linear(y, dec_Wy, dec_by, yp, mc);
    k_elu(yp);
    const std::size_t A = head_W.cols;
    Mat logits = arena.alloc_mat(1, A);
    k_linear(yp, head_W, head_b, logits, mc);
    std::vector<double> probs(A);
    k_softmax_vec(logits.p, A, probs.data(), mc);
    return probs;
  }
};

}  // namespace lean_detail

using lean_detail::Impl;

LeanModel::LeanModel(ParameterStore& store, const ModelConfig& config) : impl_(new Impl) {
  impl_->cfg = config;
  const auto& v = config.visual;
  if (config.task != AnswerKind::open_ended || !v.enabled || config.textual.enabled ||
      v.long_form || (v.levels != Levels::two && v.levels != Levels::three)) {
    throw ConfigError("the mirror covers open-ended visual-only 2- and 3-level models");
  }
  if (!v.clip_motion || !v.clip_question || !v.video_motion || !v.video_question) {
    throw ConfigError("the mirror runs with all conditioning stages enabled");
  }
  if (config.g != GForm::average_pool) {
    throw ConfigError("the mirror supports average-pool aggregation only");
  }
  // Materializes every parameter under its canonical name; the store hands the
  // mirror the same buffers afterwards.
  { HcrnModel model(store, config); }
  auto& I = *impl_;
  const int km = config.k_max, t = config.t;
  I.clip_motion = load_unit(store, "visual.clip.motion", v.T, km, t, config.motion_form, I.owned);
  const int clip_mid = policy_out_len(km, v.T);
  I.clip_question =
      load_unit(store, "visual.clip.question", clip_mid, km, t, config.question_form, I.owned);
  if (v.levels == Levels::two) {
    I.video_motion =
        load_unit(store, "visual.video.motion", v.N, km, t, config.motion_form, I.owned);
    I.video_question = load_unit(store, "visual.video.question", policy_out_len(km, v.N), km, t,
                                 config.question_form, I.owned);
  } else {
    I.sub_motion = load_unit(store, "visual.sub.motion", v.Q, km, t, config.motion_form, I.owned);
    I.sub_question = load_unit(store, "visual.sub.question", policy_out_len(km, v.Q), km, t,
                               config.question_form, I.owned);
    int top_n = v.P;
    if (v.P >= 5) {
      I.top_motion =
          load_unit(store, "visual.top.motion", top_n, km, t, config.motion_form, I.owned);
      I.has_top_motion = true;
      top_n = policy_out_len(km, top_n);
    }
    I.top_question =
        load_unit(store, "visual.top.question", top_n, km, t, config.question_form, I.owned);
  }
  I.lstm.Wx = fetch(store, "visual.motion_lstm.Wx", I.owned);
  I.lstm.Wh = fetch(store, "visual.motion_lstm.Wh", I.owned);
  I.lstm.b = fetch(store, "visual.motion_lstm.b", I.owned).p;
  I.lstm.hidden = static_cast<std::size_t>(config.d);
  I.ro_Wo = fetch(store, "readout.Wo", I.owned);
  I.ro_Wq = fetch(store, "readout.Wq", I.owned);
  I.ro_WI = fetch(store, "readout.WI", I.owned);
  I.ro_bI = fetch(store, "readout.bI", I.owned).p;
  I.ro_WIp = fetch(store, "readout.WIp", I.owned);
  I.ro_bIp = fetch(store, "readout.bIp", I.owned).p;
  I.dec_Wq = fetch(store, "decoder.Wq", I.owned);
  I.dec_bq = fetch(store, "decoder.bq", I.owned).p;
  I.dec_Wo = fetch(store, "decoder.Wo", I.owned);
  I.dec_bo = fetch(store, "decoder.bo", I.owned).p;
  I.dec_Wy = fetch(store, "decoder.Wy", I.owned);
  I.dec_by = fetch(store, "decoder.by", I.owned).p;
  I.head_W = fetch(store, "decoder.head.W", I.owned);
  I.head_b = fetch(store, "decoder.head.b", I.owned).p;
}

LeanModel::~LeanModel() { delete impl_; }
LeanModel::LeanModel(LeanModel&& other) noexcept : impl_(other.impl_) { other.impl_ = nullptr; }
LeanModel& LeanModel::operator=(LeanModel&& other) noexcept {
  if (this != &other) {
    delete impl_;
    impl_ = other.impl_;
    other.impl_ = nullptr;
  }
  return *this;
}

std::vector<SubsetPlan> LeanModel::draw_plans(std::uint64_t plan_seed) const {
  const auto& I = *impl_;
  const auto& v = I.cfg.visual;
  Rng rng(plan_seed);
  std::vector<SubsetPlan> plans;
  const int clip_mid = policy_out_len(I.cfg.k_max, v.T);
  for (int i = 0; i < v.N; ++i) {
    plans.push_back(make_subset_plan(v.T, I.clip_motion.k_max, I.cfg.t, rng));
    plans.push_back(make_subset_plan(clip_mid, I.clip_question.k_max, I.cfg.t, rng));
  }
  if (v.levels == Levels::two) {
    plans.push_back(make_subset_plan(v.N, I.video_motion.k_max, I.cfg.t, rng));
    plans.push_back(
        make_subset_plan(policy_out_len(I.cfg.k_max, v.N), I.video_question.k_max, I.cfg.t, rng));
  } else {
    const int sub_mid = policy_out_len(I.cfg.k_max, v.Q);
    for (int p = 0; p < v.P; ++p) {
      plans.push_back(make_subset_plan(v.Q, I.sub_motion.k_max, I.cfg.t, rng));
      plans.push_back(make_subset_plan(sub_mid, I.sub_question.k_max, I.cfg.t, rng));
    }
    int top_n = v.P;
    if (I.has_top_motion) {
      plans.push_back(make_subset_plan(top_n, I.top_motion.k_max, I.cfg.t, rng));
      top_n = policy_out_len(I.cfg.k_max, top_n);
    }
    plans.push_back(make_subset_plan(top_n, I.top_question.k_max, I.cfg.t, rng));
  }
  return plans;
}

LeanResult LeanModel::forward_with_plans(const LeanInputs& in,
                                         const std::vector<SubsetPlan>& plans) {
  auto& I = *impl_;
  const auto& v = I.cfg.visual;
  const auto F = static_cast<std::size_t>(I.cfg.d);
  const auto T = static_cast<std::size_t>(v.T);
  const auto N = static_cast<std::size_t>(v.N);
  if (in.frames.size() != N || in.motions.size() != N || in.question.size() != F) {
    throw DimensionError("mirror inputs do not match the configuration");
  }
  I.arena.reset();
  MacCounter mc;
  std::size_t cursor = 0;
  const double* q = in.question.data();

  // Motion features flattened once for the summary recurrences.
  double* motion_seq = I.arena.alloc(N * F);
  for (std::size_t i = 0; i < N; ++i) {
    std::memcpy(motion_seq + i * F, in.motions[i].data(), F * sizeof(double));
  }

  // Clip stacks run batched across clips; plan order matches the per-clip
  // draw order (motion then question for each clip in turn).
  if (cursor + 2 * N > plans.size()) throw ContractError("mirror ran past its plan list");
  std::vector<Mat> encodings(N);
  {
    std::vector<const double*> frame_bases(N), motion_ctxs(N), question_ctxs(N, q);
    std::vector<const SubsetPlan*> motion_plans(N), question_plans(N);
    for (std::size_t i = 0; i < N; ++i) {
      frame_bases[i] = in.frames[i].data();
      motion_ctxs[i] = in.motions[i].data();
      motion_plans[i] = &plans[cursor + 2 * i];
      question_plans[i] = &plans[cursor + 2 * i + 1];
    }
    cursor += 2 * N;
    std::vector<Mat> mid(N);
    I.unit_stage_batch(I.clip_motion, T, F, frame_bases, motion_ctxs, motion_plans, mid, mc);
    std::vector<const double*> mid_bases(N);
    for (std::size_t i = 0; i < N; ++i) mid_bases[i] = mid[i].p;
    I.unit_stage_batch(I.clip_question, mid.front().rows, F, mid_bases, question_ctxs,
                       question_plans, encodings, mc);
  }

  std::vector<Mat> video_objects;
  if (v.levels == Levels::two) {
    const double* summary = lean_lstm_last(I.lstm, motion_seq, N, F, I.arena, mc);
    std::vector<Mat> mid = I.run_unit(I.video_motion, encodings, summary, plans, cursor, mc);
    video_objects = I.run_unit(I.video_question, mid, q, plans, cursor, mc);
  } else {
    const auto P = static_cast<std::size_t>(v.P);
    const auto Q = static_cast<std::size_t>(v.Q);
    std::vector<Mat> group_objects;
    for (std::size_t p = 0; p < P; ++p) {
      const std::vector<Mat> group(encodings.begin() + static_cast<std::ptrdiff_t>(p * Q),
                                   encodings.begin() + static_cast<std::ptrdiff_t>((p + 1) * Q));
      const double* summary = lean_lstm_last(I.lstm, motion_seq + p * Q * F, Q, F, I.arena, mc);
      std::vector<Mat> mid = I.run_unit(I.sub_motion, group, summary, plans, cursor, mc);
      std::vector<Mat> enc = I.run_unit(I.sub_question, mid, q, plans, cursor, mc);
      group_objects.push_back(I.stack(enc));
    }
    if (I.has_top_motion) {
      const double* summary = lean_lstm_last(I.lstm, motion_seq, N, F, I.arena, mc);
      group_objects = I.run_unit(I.top_motion, group_objects, summary, plans, cursor, mc);
    }
    video_objects = I.run_unit(I.top_question, group_objects, q, plans, cursor, mc);
  }

  const Mat o_prime = I.stack(video_objects);
  const Mat pooled = I.readout(o_prime, q, mc);
  LeanResult res;
  res.probs = I.decode(pooled, q, mc);
  res.macs = mc.macs;
  return res;
}

LeanResult LeanModel::forward(const LeanInputs& in, std::uint64_t plan_seed) {
  return forward_with_plans(in, draw_plans(plan_seed));
}

// ---- synthetic inputs ----------------------------------------------------------

LeanInputs synth_inputs(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  const auto N = static_cast<std::size_t>(config.visual.N);
  const auto T = static_cast<std::size_t>(config.visual.T);
  const auto F = static_cast<std::size_t>(config.d);
  LeanInputs in;
  in.frames.resize(N);
  for (auto& f : in.frames) {
    f.resize(T * F);
    for (double& x : f) x = rng.uniform(-1.0, 1.0);
  }
  in.motions.resize(N);
  for (auto& m : in.motions) {
    m.resize(F);
    for (double& x : m) x = rng.uniform(-1.0, 1.0);
  }
  in.question.resize(F);
  for (double& x : in.question) x = rng.uniform(-1.0, 1.0);
  return in;
}

SampleInputs to_sample_inputs(const LeanInputs& in, const ModelConfig& config) {
  const auto T = static_cast<std::size_t>(config.visual.T);
  const auto F = static_cast<std::size_t>(config.d);
  SampleInputs s;
  for (const auto& f : in.frames) s.clip_frames.push_back(Tensor::from({T, F}, f));
  std::vector<Tensor> motions;
  for (const auto& m : in.motions) motions.push_back(Tensor::row(m));
  s.set_clip_motions(std::move(motions));
  s.question = Tensor::row(in.question);
  return s;
}

// ---- measurement ----------------------------------------------------------------

std::uint64_t measure_crn_unit_macs(int t, int k_max, int K, int F, std::uint64_t seed) {
  if (k_max < 2) throw ConfigError("unit measurement needs k_max >= 2");
  const int n = k_max + 1;
  ParameterStore store(seed);
  CrnUnit unit(store, "probe",
               CrnConfig{k_max, t, GForm::average_pool, HForm::dual_multiplicative}, F);
  std::vector<Tensor> owned;
  LeanCrn lean;
  lean.k_max = k_max;
  lean.t = t;
  lean.form = LeanForm::dual_multiplicative;
  for (int k = 2; k <= k_max; ++k) {
    lean.W.push_back(fetch(store, "probe.k" + std::to_string(k) + ".h", owned));
  }
  Rng rng(mix_seed(seed, fnv1a64("bench.unit")));
  std::vector<double> buf(static_cast<std::size_t>(n) * K * F);
  for (double& x : buf) x = rng.uniform(-1.0, 1.0);
  std::vector<double> c1(static_cast<std::size_t>(F)), c2(static_cast<std::size_t>(F));
  for (double& x : c1) x = rng.uniform(-1.0, 1.0);
  for (double& x : c2) x = rng.uniform(-1.0, 1.0);
  std::vector<Mat> objects;
  for (int i = 0; i < n; ++i) {
    objects.push_back(Mat{buf.data() + static_cast<std::size_t>(i) * K * F,
                          static_cast<std::size_t>(K), static_cast<std::size_t>(F)});
  }
  const SubsetPlan plan = make_subset_plan(n, k_max, t, rng);
  Arena arena;
  MacCounter mc;
  (void)lean_crn_forward(lean, objects, c1.data(), c2.data(), plan, arena, mc);
  return mc.macs;
}

namespace {

double quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  const double h = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(h);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

namespace {

// One configuration armed for timing: model, inputs, and plans live for the
// whole run so repeats measure only the forward pass.
struct TimingRig {
  CostReport report;
  std::unique_ptr<ParameterStore> store;
  std::unique_ptr<LeanModel> lean;
  LeanInputs in;
  std::vector<SubsetPlan> plans;
  std::vector<double> wall_ms;

  explicit TimingRig(const BenchConfig& config) {
    if (config.repeats < 3) throw ConfigError("timing needs at least 3 repeats");
    ModelConfig mc;
    mc.task = AnswerKind::open_ended;
    mc.answer_space = 4;
    mc.d = config.F;
    mc.k_max = 0;
    mc.t = config.t;
    mc.visual.enabled = true;
    mc.visual.levels = config.levels;
    mc.visual.N = config.N;
    mc.visual.T = config.T;
    mc.visual.P = config.P;
    mc.visual.Q = config.Q;
    report.config = config;
    report.analytic =
        cost_hcrn(config.levels, config.N, config.T, config.P, config.Q, config.t, config.F);
    store = std::make_unique<ParameterStore>(config.seed);
    lean = std::make_unique<LeanModel>(*store, mc);
    in = synth_inputs(mc, mix_seed(config.seed, fnv1a64("bench.inputs")));
    plans = lean->draw_plans(mix_seed(config.seed, fnv1a64("bench.plans")));
    wall_ms.reserve(static_cast<std::size_t>(config.repeats));
    for (int w = 0; w < 3; ++w) (void)lean->forward_with_plans(in, plans);  // warmup
  }

  void warm_once() { (void)lean->forward_with_plans(in, plans); }

  void run_once() {
    const auto t0 = std::chrono::steady_clock::now();
    const LeanResult res = lean->forward_with_plans(in, plans);
    const auto t1 = std::chrono::steady_clock::now();
    wall_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    if (wall_ms.size() == 1) {
      report.macs = res.macs;
    } else if (res.macs != report.macs) {
      throw ContractError("MAC count varied across repeats of one configuration");
    }
  }

  CostReport finish() {
    std::sort(wall_ms.begin(), wall_ms.end());
    report.wall_ms_median = quantile(wall_ms, 0.5);
    report.wall_ms_iqr = quantile(wall_ms, 0.75) - quantile(wall_ms, 0.25);
    return report;
  }
};

}  // namespace

CostReport measure(const BenchConfig& config) {
  TimingRig rig(config);
  for (int r = 0; r < config.repeats; ++r) rig.run_once();
  return rig.finish();
}

std::pair<CostReport, CostReport> measure_pair(const BenchConfig& a, const BenchConfig& b) {
  if (a.repeats != b.repeats) throw ConfigError("paired timing needs equal repeat counts");
  TimingRig ra(a), rb(b);
  // Blocks rather than single repeats: alternating every run would evict each
  // side's weights between samples and charge both sides the reload, while a
  // block settles back into cache after its first run.
  const int block = 8;
  int done = 0;
  for (int round = 0; done < a.repeats; ++round) {
    const int n = std::min(block, a.repeats - done);
    TimingRig& first = (round % 2 == 0) ? ra : rb;
    TimingRig& second = (round % 2 == 0) ? rb : ra;
    first.warm_once();  // cache refill run absorbed before the counted block
    for (int r = 0; r < n; ++r) first.run_once();
    second.warm_once();
    for (int r = 0; r < n; ++r) second.run_once();
    done += n;
  }
  return {ra.finish(), rb.finish()};
}

// ---- reporting -------------------------------------------------------------------

void write_csv_header(std::ostream& os) {
  os << "config_id,levels,N,T,P,Q,F,analytic_g,analytic_h,macs,wall_ms_median,wall_ms_iqr\n";
}

void write_csv_row(std::ostream& os, const CostReport& report) {
  const auto& c = report.config;
  os << c.config_id << ',' << levels_name(c.levels) << ',' << c.N << ',' << c.T << ',' << c.P
     << ',' << c.Q << ',' << c.F << ',' << std::fixed << std::setprecision(0)
     << report.analytic.total.g << ',' << report.analytic.total.h << ',' << report.macs << ','
     << std::setprecision(4) << report.wall_ms_median << ',' << report.wall_ms_iqr << '\n';
  os.unsetf(std::ios_base::fixed);
}

std::string depth_comparison_line(const CostReport& two_level, const CostReport& three_level) {
  std::ostringstream os;
  os << "3-level vs 2-level: macs " << three_level.macs << " vs " << two_level.macs;
  if (three_level.macs > 0) {
    os << " (x" << std::fixed << std::setprecision(3)
       << static_cast<double>(two_level.macs) / static_cast<double>(three_level.macs)
       << (three_level.macs < two_level.macs ? ", lower)" : ", not lower)");
  } else {
    os << " (undefined ratio)";
  }
  os << ", wall median " << std::setprecision(4) << three_level.wall_ms_median << " ms vs "
     << two_level.wall_ms_median << " ms";
  if (three_level.wall_ms_median > 0.0) {
    os << " (x" << std::setprecision(3) << two_level.wall_ms_median / three_level.wall_ms_median
       << (three_level.wall_ms_median < two_level.wall_ms_median ? ", faster)" : ", not faster)");
  }
  return os.str();
}

}  // namespace crnkit
