#include "crnkit/nn.hpp"

#include <cmath>

#include "crnkit/data.hpp"
#include "crnkit/errors.hpp"

namespace crnkit {

namespace {

void glorot_fill(Tensor& t, std::uint64_t seed) {
  const Shape& s = t.shape();
  // fan_in/fan_out from the two trailing axes; rank-1 counts as fan_out only.
  double fan_in = s.size() >= 2 ? static_cast<double>(s[s.size() - 2]) : 0.0;
  double fan_out = s.empty() ? 1.0 : static_cast<double>(s.back());
  double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Rng rng(seed);
  double* p = t.data();
  for (std::size_t i = 0; i < t.size(); ++i) p[i] = rng.uniform(-bound, bound);
}

}  // namespace

Parameter& ParameterStore::get_or_create(const std::string& name, Shape shape, Init init) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    if (it->second->tensor().shape() != shape) {
      throw ContractError("parameter '" + name + "' re-requested with a different shape");
    }
    return *it->second;
  }
  Tensor t(shape, 0.0);
  if (init == Init::glorot) glorot_fill(t, mix_seed(init_seed_, fnv1a64(name)));
  auto p = std::make_shared<Parameter>(name, std::move(t));
  auto [pos, inserted] = params_.emplace(name, std::move(p));
  (void)inserted;
  return *pos->second;
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : it->second.get();
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : it->second.get();
}

void ParameterStore::zero_grad() {
  for (auto& [name, p] : params_) p->tensor().clear_grad();
}

ParameterStore ParameterStore::mirror() const {
  ParameterStore out(init_seed_);
  for (const auto& [name, p] : params_) {
    out.params_.emplace(name, std::make_shared<Parameter>(name, p->tensor().alias()));
  }
  return out;
}

void ParameterStore::accumulate_grads_from(const ParameterStore& worker) {
  for (auto& [name, p] : params_) {
    const Parameter* w = worker.find(name);
    if (w == nullptr || !w->tensor().has_grad()) continue;
    auto& dst = p->tensor().grad_buffer();
    const auto& src = w->tensor().grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

void ParameterStore::save(const std::filesystem::path& path) const {
  data::FeatureBundle bundle;
  for (const auto& [name, p] : params_) bundle.add(name, p->tensor(), data::Dtype::f64);
  data::save_feature_bundle(bundle, path);
}

void ParameterStore::load(const std::filesystem::path& path) {
  data::FeatureBundle bundle = data::load_feature_bundle(path);
  for (auto& [name, p] : params_) {
    if (!bundle.has(name)) throw FormatError("checkpoint missing parameter '" + name + "'");
    Tensor t = bundle.tensor(name);
    if (t.shape() != p->tensor().shape()) {
      throw FormatError("checkpoint shape mismatch for parameter '" + name + "'");
    }
    std::copy(t.data(), t.data() + t.size(), p->tensor().data());
  }
}

void adam_step(ParameterStore& store, const AdamConfig& cfg) {
  for (auto& [name, p] : store.all()) {
    Tensor& t = p->tensor();
    if (!t.has_grad()) continue;
    AdamState& st = p->adam();
    const std::size_t n = t.size();
    if (st.m.empty()) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    st.step += 1;
    const auto& g = t.grad();
    double* val = t.data();
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < n; ++i) {
      st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
      st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      val[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ---- recurrent cells --------------------------------------------------------

LstmParams make_lstm_params(ParameterStore& store, const std::string& prefix, std::size_t in,
                            std::size_t hidden) {
  LstmParams p;
  p.Wx = store.get_or_create(prefix + ".Wx", {in, 4 * hidden}).tensor();
  p.Wh = store.get_or_create(prefix + ".Wh", {hidden, 4 * hidden}).tensor();
  p.b = store.get_or_create(prefix + ".b", {4 * hidden}, Init::zeros).tensor();
  return p;
}

LstmState lstm_cell(const Tensor& x, const LstmState& state, const LstmParams& p) {
  const std::size_t hidden = state.h.size();
  if (p.Wx.extent(1) != 4 * hidden || p.Wh.extent(0) != hidden) {
    throw DimensionError("lstm_cell: state width does not match gate parameters");
  }
  Tensor gates = add(add(linear(x, p.Wx), linear(state.h, p.Wh)), p.b);
  Tensor i = sigmoid(slice_cols(gates, 0, hidden));
  Tensor f = sigmoid(slice_cols(gates, hidden, hidden));
  Tensor g = tanh_op(slice_cols(gates, 2 * hidden, hidden));
  Tensor o = sigmoid(slice_cols(gates, 3 * hidden, hidden));
  LstmState out;
  out.c = add(hadamard(f, state.c), hadamard(i, g));
  out.h = hadamard(o, tanh_op(out.c));
  return out;
}

namespace {

// slice_cols on a rank-2 tensor keeps rank 2; gate math above works on rank-1
// rows, so run the sequence row by row.
Tensor seq_row(const Tensor& seq, std::size_t r) {
  Tensor row = slice_rows(seq, r, 1);
  return reshape(row, {row.cols()});
}

}  // namespace

Tensor lstm_last(const Tensor& seq, const LstmParams& p, std::size_t hidden) {
  if (seq.rank() != 2) throw DimensionError("lstm_last: sequence must be T x width");
  LstmState st{Tensor({hidden}, 0.0), Tensor({hidden}, 0.0)};
  const std::size_t steps = seq.extent(0);
  for (std::size_t t = 0; t < steps; ++t) st = lstm_cell(seq_row(seq, t), st, p);
  return st.h;
}

BilstmParams make_bilstm_params(ParameterStore& store, const std::string& prefix, std::size_t in,
                                std::size_t out_width) {
  if (out_width % 2 != 0) {
    throw ConfigError("bilstm '" + prefix + "': output width " + std::to_string(out_width) +
                      " must be even (half per direction)");
  }
  BilstmParams p;
  p.hidden = out_width / 2;
  p.fwd = make_lstm_params(store, prefix + ".fwd", in, p.hidden);
  p.bwd = make_lstm_params(store, prefix + ".bwd", in, p.hidden);
  return p;
}

BilstmOut bilstm_encode(const Tensor& seq, const BilstmParams& p) {
  if (seq.rank() != 2) throw DimensionError("bilstm_encode: sequence must be T x width");
  const std::size_t steps = seq.extent(0);
  if (steps == 0) throw DimensionError("bilstm_encode: empty sequence");
  std::vector<Tensor> fwd_h(steps), bwd_h(steps);
  LstmState st{Tensor({p.hidden}, 0.0), Tensor({p.hidden}, 0.0)};
  for (std::size_t t = 0; t < steps; ++t) {
    st = lstm_cell(seq_row(seq, t), st, p.fwd);
    fwd_h[t] = st.h;
  }
  Tensor fwd_last = st.h;
  st = LstmState{Tensor({p.hidden}, 0.0), Tensor({p.hidden}, 0.0)};
  for (std::size_t t = steps; t-- > 0;) {
    st = lstm_cell(seq_row(seq, t), st, p.bwd);
    bwd_h[t] = st.h;
  }
  Tensor bwd_last = st.h;
  std::vector<Tensor> rows(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor parts[2] = {fwd_h[t], bwd_h[t]};
    rows[t] = reshape(concat_cols(parts), {1, 2 * p.hidden});
  }
  BilstmOut out;
  out.hiddens = concat_rows(rows);
  Tensor last_parts[2] = {fwd_last, bwd_last};
  out.final_state = concat_cols(last_parts);
  return out;
}

}  // namespace crnkit
