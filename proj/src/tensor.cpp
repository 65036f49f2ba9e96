#include "crnkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace crnkit {

namespace {

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

thread_local Tape* g_current_tape = nullptr;

bool taping(std::initializer_list<const Tensor*> inputs) {
  if (g_current_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Accumulating helper used inside backward closures.
std::vector<double>* grad_of(const std::shared_ptr<detail::TensorNode>& n) {
  if (!n->requires_grad) return nullptr;
  if (n->grad.empty()) n->grad.assign(n->values->size(), 0.0);
  return &n->grad;
}

// Output grad, or nullptr when the output never received any (dead branch).
const std::vector<double>* out_grad(const std::shared_ptr<detail::TensorNode>& n) {
  return n->grad.empty() ? nullptr : &n->grad;
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) {
  node_ = std::make_shared<detail::TensorNode>();
  node_->values = std::make_shared<std::vector<double>>(shape_size(shape), fill);
  node_->shape = std::move(shape);
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  Tensor t;
  t.node_ = std::make_shared<detail::TensorNode>();
  t.node_->values = std::make_shared<std::vector<double>>(std::move(values));
  t.node_->shape = std::move(shape);
  return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::row(std::vector<double> values) {
  Shape s{values.size()};
  return from(std::move(s), std::move(values));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("shape(): undefined tensor");
  return node_->shape;
}

std::size_t Tensor::extent(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw IndexError("extent: axis " + std::to_string(axis));
  return s[axis];
}

std::size_t Tensor::size() const {
  if (!node_) return 0;
  return node_->values->size();
}

std::size_t Tensor::cols() const {
  const Shape& s = shape();
  return s.empty() ? 1 : s.back();
}

double* Tensor::data() {
  require_defined(*this, "data");
  return node_->values->data();
}

const double* Tensor::data() const {
  require_defined(*this, "data");
  return node_->values->data();
}

double Tensor::value() const {
  if (size() != 1) throw ContractError("value(): tensor has " + std::to_string(size()) + " elements");
  return (*node_->values)[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) throw IndexError("at: rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= s[axis]) throw IndexError("at: index out of range on axis " + std::to_string(axis));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return (*node_->values)[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  require_defined(*this, "set_requires_grad");
  node_->requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double>& Tensor::grad_buffer() {
  require_defined(*this, "grad_buffer");
  if (node_->grad.empty()) node_->grad.assign(node_->values->size(), 0.0);
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad(): no gradient present");
  return node_->grad;
}

double Tensor::grad_at(std::initializer_list<std::size_t> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) throw IndexError("grad_at: rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    flat = flat * s[axis] + i;
    ++axis;
  }
  return grad()[flat];
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::alias() const {
  require_defined(*this, "alias");
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = node_->shape;
  n->values = node_->values;
  n->requires_grad = node_->requires_grad;
  return wrap(std::move(n));
}

// ---- Tape -----------------------------------------------------------------

Tape::Tape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward_step) {
  steps_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("Tape::backward: tape already consumed");
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("Tape::backward: loss must be a single-element tensor");
  }
  if (!loss.requires_grad()) {
    throw ContractError("Tape::backward: loss does not require grad");
  }
  consumed_ = true;
  auto n = loss.node();
  n->grad.assign(1, 1.0);
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

// ---- op helpers -------------------------------------------------------------

namespace {

Tensor make_out(Shape shape) { return Tensor(std::move(shape)); }

void mark_and_record(Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  g_current_tape->record(std::move(fn));
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  Tensor out = make_out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (taping({&a, &b})) {
    auto na = a.node(), nb = b.node(), no = out.node();
    mark_and_record(out, [na, nb, no] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na))
        for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (*g)[i];
      if (auto* gb = grad_of(nb))
        for (std::size_t i = 0; i < g->size(); ++i) (*gb)[i] += (*g)[i];
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  Tensor out = make_out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (taping({&a, &b})) {
    auto na = a.node(), nb = b.node(), no = out.node();
    mark_and_record(out, [na, nb, no] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na))
        for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (*g)[i];
      if (auto* gb = grad_of(nb))
        for (std::size_t i = 0; i < g->size(); ++i) (*gb)[i] -= (*g)[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  require_defined(a, "scale");
  Tensor out = make_out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no, s] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na))
        for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += s * (*g)[i];
    });
  }
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_defined(a, "hadamard");
  require_defined(b, "hadamard");
  const bool broadcast = (b.rank() == 1 && a.shape() != b.shape());
  if (broadcast) {
    if (b.size() != a.cols()) {
      throw DimensionError("hadamard: cannot broadcast " + shape_str(b.shape()) + " across " +
                           shape_str(a.shape()));
    }
  } else {
    require_same_shape(a, b, "hadamard");
  }
  Tensor out = make_out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t rows = a.rows(), cols = a.cols();
  if (broadcast) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) po[r * cols + c] = pa[r * cols + c] * pb[c];
  } else {
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  }
  if (taping({&a, &b})) {
    auto na = a.node(), nb = b.node(), no = out.node();
    mark_and_record(out, [na, nb, no, broadcast, rows, cols] {
      const auto* g = out_grad(no);
      if (!g) return;
      const auto& va = *na->values;
      const auto& vb = *nb->values;
      auto* ga = grad_of(na);
      auto* gb = grad_of(nb);
      if (broadcast) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const double gv = (*g)[r * cols + c];
            if (ga) (*ga)[r * cols + c] += gv * vb[c];
            if (gb) (*gb)[c] += gv * va[r * cols + c];
          }
      } else {
        for (std::size_t i = 0; i < g->size(); ++i) {
          if (ga) (*ga)[i] += (*g)[i] * vb[i];
          if (gb) (*gb)[i] += (*g)[i] * va[i];
        }
      }
    });
  }
  return out;
}

// ---- structure --------------------------------------------------------------

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total_cols = 0;
  for (const Tensor& p : parts) {
    require_defined(p, "concat_cols");
    if (p.rows() != rows || p.rank() != parts.front().rank()) {
      throw DimensionError("concat_cols: row/rank mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(parts.front().shape()));
    }
    total_cols += p.cols();
  }
  Shape out_shape = parts.front().shape();
  out_shape.back() = total_cols;
  Tensor out = make_out(std::move(out_shape));
  double* po = out.data();
  std::size_t col_off = 0;
  for (const Tensor& p : parts) {
    const double* pp = p.data();
    const std::size_t pc = p.cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::memcpy(po + r * total_cols + col_off, pp + r * pc, pc * sizeof(double));
    col_off += pc;
  }
  bool any = false;
  for (const Tensor& p : parts)
    if (p.requires_grad()) any = true;
  if (g_current_tape && any) {
    std::vector<std::shared_ptr<detail::TensorNode>> ins;
    ins.reserve(parts.size());
    for (const Tensor& p : parts) ins.push_back(p.node());
    auto no = out.node();
    mark_and_record(out, [ins, no, rows, total_cols] {
      const auto* g = out_grad(no);
      if (!g) return;
      std::size_t col_off = 0;
      for (const auto& n : ins) {
        const std::size_t pc = n->shape.empty() ? 1 : n->shape.back();
        if (auto* gi = grad_of(n)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pc; ++c)
              (*gi)[r * pc + c] += (*g)[r * total_cols + col_off + c];
        }
        col_off += pc;
      }
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t total_rows = 0;
  for (const Tensor& p : parts) {
    require_defined(p, "concat_rows");
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: col mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(parts.front().shape()));
    }
    total_rows += p.rows();
  }
  Tensor out = make_out({total_rows, cols});
  double* po = out.data();
  std::size_t row_off = 0;
  for (const Tensor& p : parts) {
    std::memcpy(po + row_off * cols, p.data(), p.size() * sizeof(double));
    row_off += p.rows();
  }
  bool any = false;
  for (const Tensor& p : parts)
    if (p.requires_grad()) any = true;
  if (g_current_tape && any) {
    std::vector<std::shared_ptr<detail::TensorNode>> ins;
    ins.reserve(parts.size());
    for (const Tensor& p : parts) ins.push_back(p.node());
    auto no = out.node();
    mark_and_record(out, [ins, no, cols] {
      const auto* g = out_grad(no);
      if (!g) return;
      std::size_t off = 0;
      for (const auto& n : ins) {
        const std::size_t sz = n->values->size();
        if (auto* gi = grad_of(n))
          for (std::size_t i = 0; i < sz; ++i) (*gi)[i] += (*g)[off + i];
        off += sz;
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t len) {
  require_defined(a, "slice_cols");
  const std::size_t rows = a.rows(), cols = a.cols();
  if (begin + len > cols) throw IndexError("slice_cols: range past width");
  Shape out_shape = a.shape();
  out_shape.back() = len;
  Tensor out = make_out(std::move(out_shape));
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(po + r * len, pa + r * cols + begin, len * sizeof(double));
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no, begin, len, rows, cols] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < len; ++c) (*ga)[r * cols + begin + c] += (*g)[r * len + c];
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t len) {
  require_defined(a, "slice_rows");
  const std::size_t rows = a.rows(), cols = a.cols();
  if (begin + len > rows) throw IndexError("slice_rows: range past height");
  Tensor out = make_out({len, cols});
  std::memcpy(out.data(), a.data() + begin * cols, len * cols * sizeof(double));
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no, begin, len, cols] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na))
        for (std::size_t i = 0; i < len * cols; ++i) (*ga)[begin * cols + i] += (*g)[i];
    });
  }
  return out;
}

Tensor broadcast_rows(const Tensor& v, std::size_t n_rows) {
  require_defined(v, "broadcast_rows");
  if (v.rank() != 1) throw DimensionError("broadcast_rows: expected rank-1, got " + shape_str(v.shape()));
  const std::size_t cols = v.size();
  Tensor out = make_out({n_rows, cols});
  double* po = out.data();
  const double* pv = v.data();
  for (std::size_t r = 0; r < n_rows; ++r) std::memcpy(po + r * cols, pv, cols * sizeof(double));
  if (taping({&v})) {
    auto nv = v.node(), no = out.node();
    mark_and_record(out, [nv, no, n_rows, cols] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* gv = grad_of(nv))
        for (std::size_t r = 0; r < n_rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) (*gv)[c] += (*g)[r * cols + c];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: size mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out = Tensor::from(std::move(shape), *a.node()->values);
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na))
        for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (*g)[i];
    });
  }
  return out;
}

// ---- activations --------------------------------------------------------------

Tensor elu(const Tensor& a) {
  require_defined(a, "elu");
  Tensor out = make_out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0 ? pa[i] : std::expm1(pa[i]);
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na)) {
        const auto& va = *na->values;
        for (std::size_t i = 0; i < g->size(); ++i) {
          const double d = va[i] > 0.0 ? 1.0 : std::exp(va[i]);
          (*ga)[i] += d * (*g)[i];
        }
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  require_defined(a, "sigmoid");
  Tensor out = make_out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = 1.0 / (1.0 + std::exp(-pa[i]));
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na)) {
        const auto& vo = *no->values;
        for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += vo[i] * (1.0 - vo[i]) * (*g)[i];
      }
    });
  }
  return out;
}

Tensor tanh_op(const Tensor& a) {
  require_defined(a, "tanh_op");
  Tensor out = make_out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na)) {
        const auto& vo = *no->values;
        for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (1.0 - vo[i] * vo[i]) * (*g)[i];
      }
    });
  }
  return out;
}

// ---- reductions ----------------------------------------------------------------

namespace {

// Treat tensor as rows x cols; axis 0 reduces rows (output length cols),
// axis 1 reduces cols (output length rows). Rank-1 input reduces to a scalar
// on axis 0.
void reduce_dims(const Tensor& a, std::size_t axis, const char* op, std::size_t* rows,
                 std::size_t* cols) {
  if (a.rank() == 0 || a.rank() > 2) throw DimensionError(std::string(op) + ": rank must be 1 or 2");
  if (axis >= a.rank()) throw IndexError(std::string(op) + ": axis out of range");
  *rows = a.rank() == 1 ? a.size() : a.extent(0);
  *cols = a.rank() == 1 ? 1 : a.extent(1);
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis) {
  require_defined(a, "softmax");
  std::size_t rows, cols;
  reduce_dims(a, axis, "softmax", &rows, &cols);
  const bool along_rows = (a.rank() == 2 && axis == 1);
  const std::size_t groups = along_rows ? rows : cols;
  const std::size_t span = along_rows ? cols : rows;
  const std::size_t gstride = along_rows ? cols : 1;
  const std::size_t estride = along_rows ? 1 : cols;
  Tensor out = make_out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t g = 0; g < groups; ++g) {
    const double* base = pa + g * gstride;
    double mx = base[0];
    for (std::size_t i = 1; i < span; ++i) mx = std::max(mx, base[i * estride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < span; ++i) sum += std::exp(base[i * estride] - mx);
    double* ob = po + g * gstride;
    for (std::size_t i = 0; i < span; ++i) ob[i * estride] = std::exp(base[i * estride] - mx) / sum;
  }
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no, groups, span, gstride, estride] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na)) {
        const auto& p = *no->values;
        for (std::size_t grp = 0; grp < groups; ++grp) {
          const std::size_t base = grp * gstride;
          double dot = 0.0;
          for (std::size_t i = 0; i < span; ++i)
            dot += (*g)[base + i * estride] * p[base + i * estride];
          for (std::size_t i = 0; i < span; ++i) {
            const std::size_t k = base + i * estride;
            (*ga)[k] += p[k] * ((*g)[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor mean_pool(const Tensor& a, std::size_t axis) {
  require_defined(a, "mean_pool");
  std::size_t rows, cols;
  reduce_dims(a, axis, "mean_pool", &rows, &cols);
  const bool over_rows = (a.rank() == 1) || axis == 0;
  const std::size_t out_len = over_rows ? cols : rows;
  const std::size_t n_reduce = over_rows ? rows : cols;
  Tensor out = a.rank() == 1 ? make_out({1}) : make_out({out_len});
  const double* pa = a.data();
  double* po = out.data();
  std::fill(po, po + out.size(), 0.0);
  if (over_rows) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) po[c] += pa[r * cols + c];
  } else {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) po[r] += pa[r * cols + c];
  }
  const double inv = 1.0 / static_cast<double>(n_reduce);
  for (std::size_t i = 0; i < out.size(); ++i) po[i] *= inv;
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no, rows, cols, over_rows, inv] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na)) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            (*ga)[r * cols + c] += inv * (*g)[over_rows ? c : r];
      }
    });
  }
  return out;
}

Tensor sum_pool(const Tensor& a, std::size_t axis) {
  require_defined(a, "sum_pool");
  std::size_t rows, cols;
  reduce_dims(a, axis, "sum_pool", &rows, &cols);
  const bool over_rows = (a.rank() == 1) || axis == 0;
  const std::size_t out_len = over_rows ? cols : rows;
  Tensor out = a.rank() == 1 ? make_out({1}) : make_out({out_len});
  const double* pa = a.data();
  double* po = out.data();
  std::fill(po, po + out.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) po[over_rows ? c : r] += pa[r * cols + c];
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no, rows, cols, over_rows] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            (*ga)[r * cols + c] += (*g)[over_rows ? c : r];
    });
  }
  return out;
}

Tensor max_pool(const Tensor& a, std::size_t axis) {
  require_defined(a, "max_pool");
  std::size_t rows, cols;
  reduce_dims(a, axis, "max_pool", &rows, &cols);
  const bool over_rows = (a.rank() == 1) || axis == 0;
  const std::size_t out_len = over_rows ? cols : rows;
  Tensor out = a.rank() == 1 ? make_out({1}) : make_out({out_len});
  const double* pa = a.data();
  double* po = out.data();
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  if (over_rows) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t best = 0;
      for (std::size_t r = 1; r < rows; ++r)
        if (pa[r * cols + c] > pa[best * cols + c]) best = r;
      (*argmax)[c] = best;
      po[c] = pa[best * cols + c];
    }
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < cols; ++c)
        if (pa[r * cols + c] > pa[r * cols + best]) best = c;
      (*argmax)[r] = best;
      po[r] = pa[r * cols + best];
    }
  }
  if (taping({&a})) {
    auto na = a.node(), no = out.node();
    mark_and_record(out, [na, no, cols, over_rows, argmax] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* ga = grad_of(na)) {
        for (std::size_t i = 0; i < g->size(); ++i) {
          const std::size_t flat = over_rows ? (*argmax)[i] * cols + i : i * cols + (*argmax)[i];
          (*ga)[flat] += (*g)[i];
        }
      }
    });
  }
  return out;
}

Tensor mean_of(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("mean_of: no inputs");
  for (const Tensor& p : parts) {
    require_defined(p, "mean_of");
    require_same_shape(p, parts.front(), "mean_of");
  }
  Tensor out = make_out(parts.front().shape());
  double* po = out.data();
  const std::size_t n = out.size();
  std::fill(po, po + n, 0.0);
  for (const Tensor& p : parts) {
    const double* pp = p.data();
    for (std::size_t i = 0; i < n; ++i) po[i] += pp[i];
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (std::size_t i = 0; i < n; ++i) po[i] *= inv;
  bool any = false;
  for (const Tensor& p : parts)
    if (p.requires_grad()) any = true;
  if (g_current_tape && any) {
    std::vector<std::shared_ptr<detail::TensorNode>> ins;
    ins.reserve(parts.size());
    for (const Tensor& p : parts) ins.push_back(p.node());
    auto no = out.node();
    mark_and_record(out, [ins, no, inv] {
      const auto* g = out_grad(no);
      if (!g) return;
      for (const auto& nn : ins)
        if (auto* gi = grad_of(nn))
          for (std::size_t i = 0; i < g->size(); ++i) (*gi)[i] += inv * (*g)[i];
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
  require_defined(x, "scale_rows");
  require_defined(w, "scale_rows");
  if (x.rank() != 2 || w.rank() != 1 || w.size() != x.extent(0)) {
    throw DimensionError("scale_rows: need [n,m] and [n], got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  Tensor out = make_out(x.shape());
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) po[r * cols + c] = px[r * cols + c] * pw[r];
  if (taping({&x, &w})) {
    auto nx = x.node(), nw = w.node(), no = out.node();
    mark_and_record(out, [nx, nw, no, rows, cols] {
      const auto* g = out_grad(no);
      if (!g) return;
      const auto& vx = *nx->values;
      const auto& vw = *nw->values;
      auto* gx = grad_of(nx);
      auto* gw = grad_of(nw);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const double gv = (*g)[r * cols + c];
          if (gx) (*gx)[r * cols + c] += gv * vw[r];
          if (gw) (*gw)[r] += gv * vx[r * cols + c];
        }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& W, const Tensor* b) {
  require_defined(x, "linear");
  require_defined(W, "linear");
  if (W.rank() != 2) throw DimensionError("linear: weight must be rank-2, got " + shape_str(W.shape()));
  const std::size_t in = W.extent(0), out_w = W.extent(1);
  if (x.cols() != in) {
    throw DimensionError("linear: input width " + shape_str(x.shape()) + " vs weight " +
                         shape_str(W.shape()));
  }
  if (b != nullptr) {
    require_defined(*b, "linear");
    if (b->rank() != 1 || b->size() != out_w)
      throw DimensionError("linear: bias " + shape_str(b->shape()) + " vs weight " + shape_str(W.shape()));
  }
  const std::size_t rows = x.rows();
  Shape out_shape = x.shape();
  if (out_shape.empty())
    out_shape = {out_w};
  else
    out_shape.back() = out_w;
  Tensor out = make_out(std::move(out_shape));
  const double* px = x.data();
  const double* pw = W.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* orow = po + r * out_w;
    if (b != nullptr)
      std::memcpy(orow, b->data(), out_w * sizeof(double));
    else
      std::fill(orow, orow + out_w, 0.0);
    const double* xrow = px + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double xv = xrow[i];
      const double* wrow = pw + i * out_w;
      for (std::size_t o = 0; o < out_w; ++o) orow[o] += xv * wrow[o];
    }
  }
  const Tensor* inputs[3] = {&x, &W, b};
  if (taping({inputs[0], inputs[1], inputs[2]})) {
    auto nx = x.node(), nw = W.node(), no = out.node();
    std::shared_ptr<detail::TensorNode> nb = b ? b->node() : nullptr;
    mark_and_record(out, [nx, nw, nb, no, rows, in, out_w] {
      const auto* g = out_grad(no);
      if (!g) return;
      const auto& vx = *nx->values;
      const auto& vw = *nw->values;
      auto* gx = grad_of(nx);
      auto* gw = grad_of(nw);
      auto* gb = nb ? grad_of(nb) : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* grow = g->data() + r * out_w;
        if (gx) {
          double* gxr = gx->data() + r * in;
          for (std::size_t i = 0; i < in; ++i) {
            const double* wrow = vw.data() + i * out_w;
            double acc = 0.0;
            for (std::size_t o = 0; o < out_w; ++o) acc += grow[o] * wrow[o];
            gxr[i] += acc;
          }
        }
        if (gw) {
          const double* xrow = vx.data() + r * in;
          for (std::size_t i = 0; i < in; ++i) {
            double* gwr = gw->data() + i * out_w;
            const double xv = xrow[i];
            for (std::size_t o = 0; o < out_w; ++o) gwr[o] += xv * grow[o];
          }
        }
        if (gb)
          for (std::size_t o = 0; o < out_w; ++o) (*gb)[o] += grow[o];
      }
    });
  }
  return out;
}

// ---- losses ---------------------------------------------------------------

Tensor cross_entropy(const Tensor& p, std::size_t label) {
  require_defined(p, "cross_entropy");
  if (p.rank() != 1) throw DimensionError("cross_entropy: expected rank-1 probabilities");
  if (label >= p.size()) {
    throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range " +
                     std::to_string(p.size()));
  }
  const double pv = std::max(p.data()[label], 1e-300);
  Tensor out = Tensor::scalar(-std::log(pv));
  if (taping({&p})) {
    auto np = p.node(), no = out.node();
    mark_and_record(out, [np, no, label, pv] {
      const auto* g = out_grad(no);
      if (!g) return;
      if (auto* gp = grad_of(np)) (*gp)[label] += -(*g)[0] / pv;
    });
  }
  return out;
}

Tensor hinge_pair(const Tensor& s_pos, const Tensor& s_neg) {
  require_defined(s_pos, "hinge_pair");
  require_defined(s_neg, "hinge_pair");
  if (s_pos.size() != 1 || s_neg.size() != 1) throw DimensionError("hinge_pair: scores must be scalar");
  const double margin = 1.0 + s_neg.value() - s_pos.value();
  const bool active = margin > 0.0;
  Tensor out = Tensor::scalar(active ? margin : 0.0);
  if (taping({&s_pos, &s_neg})) {
    auto npo = s_pos.node(), nne = s_neg.node(), no = out.node();
    mark_and_record(out, [npo, nne, no, active] {
      const auto* g = out_grad(no);
      if (!g || !active) return;
      if (auto* gp = grad_of(npo)) (*gp)[0] -= (*g)[0];
      if (auto* gn = grad_of(nne)) (*gn)[0] += (*g)[0];
    });
  }
  return out;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  require_defined(pred, "mse");
  require_defined(target, "mse");
  require_same_shape(pred, target, "mse");
  const std::size_t n = pred.size();
  const double* pp = pred.data();
  const double* pt = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pp[i] - pt[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  if (taping({&pred, &target})) {
    auto npr = pred.node(), nt = target.node(), no = out.node();
    mark_and_record(out, [npr, nt, no, n] {
      const auto* g = out_grad(no);
      if (!g) return;
      const double s = 2.0 * (*g)[0] / static_cast<double>(n);
      const auto& vp = *npr->values;
      const auto& vt = *nt->values;
      if (auto* gp = grad_of(npr))
        for (std::size_t i = 0; i < n; ++i) (*gp)[i] += s * (vp[i] - vt[i]);
      if (auto* gt = grad_of(nt))
        for (std::size_t i = 0; i < n; ++i) (*gt)[i] -= s * (vp[i] - vt[i]);
    });
  }
  return out;
}

}  // namespace crnkit
