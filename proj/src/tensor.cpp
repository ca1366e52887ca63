#include "modac/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace modac::ad {

namespace {

thread_local Tape* g_current = nullptr;
thread_local bool g_recording = true;
std::atomic<bool> g_finite_checks{true};
std::atomic<std::uint64_t> g_tape_gen{1};

using MatC = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MatM = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

[[noreturn]] void shape_fail(const char* op, std::initializer_list<Shape> shapes,
                             const std::string& detail = {}) {
  std::ostringstream os;
  os << "shape mismatch in " << op << ":";
  for (const auto& s : shapes) os << " " << shape_str(s);
  if (!detail.empty()) os << " (" << detail << ")";
  throw ShapeError(os.str());
}

void check_finite(const char* op, std::span<const double> data) {
  if (!g_finite_checks.load(std::memory_order_relaxed)) return;
  for (double v : data) {
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite value produced by " << op;
      throw NumericError(os.str());
    }
  }
}

bool live_on(const Tensor& t, Tape* tape) {
  auto impl = t.impl();
  return impl->tape == tape && impl->tape_gen == tape->generation() && impl->node >= 0;
}

bool participates(const Tensor& t, Tape* tape) {
  return live_on(t, tape) || t.impl()->requires_grad;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

int shape_size(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kSMul: return "smul";
    case Op::kSAdd: return "sadd";
    case Op::kAddRow: return "add_row";
    case Op::kSubCol: return "sub_col";
    case Op::kAddCol: return "add_col";
    case Op::kMulCol: return "mul_col";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kIm2Col: return "im2col";
    case Op::kCol2Im: return "col2im";
    case Op::kRelu: return "relu";
    case Op::kArctan: return "arctan";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kSqrt: return "sqrt";
    case Op::kPowScalar: return "pow_scalar";
    case Op::kPowExps: return "pow_exps";
    case Op::kSoftmaxLast: return "softmax_last";
    case Op::kSumAll: return "sum_all";
    case Op::kMeanAll: return "mean_all";
    case Op::kSumLast: return "sum_last";
    case Op::kSumAxis0: return "sum_axis0";
    case Op::kBcastTo: return "bcast_to";
    case Op::kBcastLast: return "bcast_last";
    case Op::kBcastAxis0: return "bcast_axis0";
    case Op::kSlice: return "slice";
    case Op::kUnslice: return "unslice";
    case Op::kConcat: return "concat";
    case Op::kReshape: return "reshape";
    case Op::kGatherLast: return "gather_last";
    case Op::kScatterLast: return "scatter_last";
    case Op::kTakeRows: return "take_rows";
    case Op::kScatterRows: return "scatter_rows";
    case Op::kMulBS: return "mul_bs";
    case Op::kAddBS: return "add_bs";
  }
  return "?";
}

// ---- Tensor ----

Tensor Tensor::scalar(double v) { return from({}, {v}); }

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  if (shape_size(shape) != static_cast<int>(data.size()))
    shape_fail("tensor", {shape}, "data size " + std::to_string(data.size()));
  check_finite("tensor literal", data);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<size_t>(shape_size(shape)), 0.0);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double v) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<size_t>(shape_size(shape)), v);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::param(Shape shape, std::vector<double> data) {
  Tensor t = from(std::move(shape), std::move(data));
  t.impl_->requires_grad = true;
  return t;
}

double Tensor::item() const {
  if (!impl_->shape.empty() && shape_size(impl_->shape) != 1)
    shape_fail("item", {impl_->shape});
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const auto& sh = impl_->shape;
  if (idx.size() != sh.size()) shape_fail("at", {sh});
  int off = 0;
  auto it = idx.begin();
  for (size_t i = 0; i < sh.size(); ++i, ++it) off = off * sh[i] + *it;
  return impl_->data[static_cast<size_t>(off)];
}

Tensor Tensor::detached() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

// ---- Tape ----

Tape::Tape() : gen_(g_tape_gen.fetch_add(1)) {}
Tape::~Tape() = default;

Tape* Tape::current() { return g_current; }

Tape::Scope::Scope(Tape& t) : prev_(g_current) { g_current = &t; }
Tape::Scope::~Scope() { g_current = prev_; }

RecordPause::RecordPause() : prev_(g_recording) { g_recording = false; }
RecordPause::~RecordPause() { g_recording = prev_; }

int Tape::ensure_on_tape(const Tensor& t) {
  if (live_on(t, this)) return t.impl()->node;
  Node n;
  n.op = Op::kLeaf;
  n.output = t;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  auto impl = t.impl();
  impl->tape = this;
  impl->tape_gen = gen_;
  impl->node = id;
  return id;
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

// ---- recording helpers ----

Tensor record_nary(Op op, std::span<const Tensor> inputs, Tensor out, NodeAttrs attrs) {
  Tape* tape = g_current;
  if (tape && g_recording) {
    bool any = false;
    for (const auto& in : inputs)
      if (participates(in, tape)) { any = true; break; }
    if (any) {
      Tape::Node n;
      n.op = op;
      n.inputs.reserve(inputs.size());
      n.saved.assign(inputs.begin(), inputs.end());
      for (const auto& in : inputs)
        n.inputs.push_back(participates(in, tape) ? tape->ensure_on_tape(in) : -1);
      n.output = out;
      n.attrs = std::move(attrs);
      tape->nodes_.push_back(std::move(n));
      auto impl = out.impl();
      impl->tape = tape;
      impl->tape_gen = tape->generation();
      impl->node = static_cast<int>(tape->nodes_.size()) - 1;
      impl->requires_grad = true;
    }
  }
  return out;
}

Tensor record_unary(Op op, const Tensor& a, Tensor out, NodeAttrs attrs) {
  const Tensor ins[1] = {a};
  return record_nary(op, ins, std::move(out), std::move(attrs));
}

Tensor record_binary(Op op, const Tensor& a, const Tensor& b, Tensor out, NodeAttrs attrs) {
  const Tensor ins[2] = {a, b};
  return record_nary(op, ins, std::move(out), std::move(attrs));
}

namespace {

Tensor fresh(Shape shape) {
  return Tensor::zeros(std::move(shape));
}

template <typename F>
Tensor elementwise2(Op op, const char* name, const Tensor& a, const Tensor& b, F f) {
  if (a.shape() != b.shape()) shape_fail(name, {a.shape(), b.shape()});
  Tensor out = fresh(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
  check_finite(name, o);
  return record_binary(op, a, b, std::move(out), {});
}

template <typename F>
Tensor elementwise1(Op op, const char* name, const Tensor& a, F f, NodeAttrs attrs = {}) {
  Tensor out = fresh(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = f(x[i]);
  check_finite(name, o);
  return record_unary(op, a, std::move(out), std::move(attrs));
}

}  // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise2(Op::kAdd, "add", a, b, [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise2(Op::kSub, "sub", a, b, [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise2(Op::kMul, "mul", a, b, [](double x, double y) { return x * y; });
}
Tensor div(const Tensor& a, const Tensor& b) {
  return elementwise2(Op::kDiv, "div", a, b, [](double x, double y) { return x / y; });
}
Tensor neg(const Tensor& a) {
  return elementwise1(Op::kNeg, "neg", a, [](double x) { return -x; });
}
Tensor smul(const Tensor& a, double c) {
  NodeAttrs at;
  at.p = c;
  return elementwise1(Op::kSMul, "smul", a, [c](double x) { return x * c; }, std::move(at));
}
Tensor sadd(const Tensor& a, double c) {
  return elementwise1(Op::kSAdd, "sadd", a, [c](double x) { return x + c; });
}

Tensor relu(const Tensor& a) {
  return elementwise1(Op::kRelu, "relu", a, [](double x) { return x > 0.0 ? x : 0.0; });
}
Tensor arctan(const Tensor& a) {
  return elementwise1(Op::kArctan, "arctan", a, [](double x) { return std::atan(x); });
}
Tensor sigmoid(const Tensor& a) {
  return elementwise1(Op::kSigmoid, "sigmoid", a, [](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
}
Tensor log(const Tensor& a) {
  return elementwise1(Op::kLog, "log", a, [](double x) { return std::log(x); });
}
Tensor exp(const Tensor& a) {
  return elementwise1(Op::kExp, "exp", a, [](double x) { return std::exp(x); });
}
Tensor sqrt(const Tensor& a) {
  return elementwise1(Op::kSqrt, "sqrt", a, [](double x) { return std::sqrt(x); });
}
Tensor pow_scalar(const Tensor& a, double p) {
  NodeAttrs at;
  at.p = p;
  return elementwise1(Op::kPowScalar, "pow_scalar", a,
                      [p](double x) { return std::pow(x, p); }, std::move(at));
}

Tensor pow_exps(const Tensor& a, std::vector<double> exps) {
  if (static_cast<int>(exps.size()) != a.size())
    shape_fail("pow_exps", {a.shape()}, "exps size " + std::to_string(exps.size()));
  Tensor out = fresh(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (size_t i = 0; i < o.size(); ++i)
    o[i] = exps[i] == 0.0 ? 1.0 : std::pow(x[i], exps[i]);
  check_finite("pow_exps", o);
  NodeAttrs at;
  at.exps = std::move(exps);
  return record_unary(Op::kPowExps, a, std::move(out), std::move(at));
}

// ---- row/col broadcasts ----

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (a.rank() != 2 || row.rank() != 1 || a.dim(1) != row.dim(0))
    shape_fail("add_row", {a.shape(), row.shape()});
  Tensor out = fresh(a.shape());
  const int r = a.dim(0), n = a.dim(1);
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = row.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < n; ++j) o[i * n + j] = x[i * n + j] + y[j];
  check_finite("add_row", o);
  return record_binary(Op::kAddRow, a, row, std::move(out), {});
}

namespace {
template <typename F>
Tensor colwise(Op op, const char* name, const Tensor& a, const Tensor& col, F f) {
  if (a.rank() != 2 || col.rank() != 1 || a.dim(0) != col.dim(0))
    shape_fail(name, {a.shape(), col.shape()});
  Tensor out = fresh(a.shape());
  const int r = a.dim(0), n = a.dim(1);
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = col.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < n; ++j) o[i * n + j] = f(x[i * n + j], y[i]);
  check_finite(name, o);
  return record_binary(op, a, col, std::move(out), {});
}
}  // namespace

Tensor sub_col(const Tensor& a, const Tensor& col) {
  return colwise(Op::kSubCol, "sub_col", a, col, [](double x, double y) { return x - y; });
}
Tensor add_col(const Tensor& a, const Tensor& col) {
  return colwise(Op::kAddCol, "add_col", a, col, [](double x, double y) { return x + y; });
}
Tensor mul_col(const Tensor& a, const Tensor& col) {
  return colwise(Op::kMulCol, "mul_col", a, col, [](double x, double y) { return x * y; });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_fail("matmul", {a.shape(), b.shape()});
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = fresh({m, n});
  if (m > 0 && k > 0 && n > 0) {
    MatC A(a.data().data(), m, k), B(b.data().data(), k, n);
    MatM O(out.mutable_data().data(), m, n);
    O.noalias() = A * B;
  }
  check_finite("matmul", out.data());
  return record_binary(Op::kMatMul, a, b, std::move(out), {});
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_fail("transpose", {a.shape()});
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = fresh({n, m});
  auto o = out.mutable_data();
  auto x = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) o[j * m + i] = x[i * n + j];
  return record_unary(Op::kTranspose, a, std::move(out), {});
}

Tensor im2col(const Tensor& input, const ConvMeta& m) {
  if (input.rank() != 4 || input.dim(0) != m.batch || input.dim(1) != m.in_h ||
      input.dim(2) != m.in_w || input.dim(3) != m.in_c)
    shape_fail("im2col", {input.shape()});
  const int rows = m.batch * m.out_h * m.out_w;
  const int cols = m.kh * m.kw * m.in_c;
  Tensor out = fresh({rows, cols});
  auto o = out.mutable_data();
  auto x = input.data();
  int row = 0;
  for (int b = 0; b < m.batch; ++b) {
    const double* img = x.data() + static_cast<size_t>(b) * m.in_h * m.in_w * m.in_c;
    for (int oy = 0; oy < m.out_h; ++oy) {
      for (int ox = 0; ox < m.out_w; ++ox, ++row) {
        double* dst = o.data() + static_cast<size_t>(row) * cols;
        for (int ky = 0; ky < m.kh; ++ky) {
          const int iy = oy - m.pad_h0 + ky;
          for (int kx = 0; kx < m.kw; ++kx) {
            const int ix = ox - m.pad_w0 + kx;
            if (iy >= 0 && iy < m.in_h && ix >= 0 && ix < m.in_w) {
              const double* src = img + (static_cast<size_t>(iy) * m.in_w + ix) * m.in_c;
              std::copy(src, src + m.in_c, dst);
            } else {
              std::fill(dst, dst + m.in_c, 0.0);
            }
            dst += m.in_c;
          }
        }
      }
    }
  }
  NodeAttrs at;
  at.conv = m;
  return record_unary(Op::kIm2Col, input, std::move(out), std::move(at));
}

Tensor col2im(const Tensor& colsT, const ConvMeta& m) {
  const int rows = m.batch * m.out_h * m.out_w;
  const int cols = m.kh * m.kw * m.in_c;
  if (colsT.rank() != 2 || colsT.dim(0) != rows || colsT.dim(1) != cols)
    shape_fail("col2im", {colsT.shape()});
  Tensor out = fresh({m.batch, m.in_h, m.in_w, m.in_c});
  auto o = out.mutable_data();
  auto x = colsT.data();
  int row = 0;
  for (int b = 0; b < m.batch; ++b) {
    double* img = o.data() + static_cast<size_t>(b) * m.in_h * m.in_w * m.in_c;
    for (int oy = 0; oy < m.out_h; ++oy) {
      for (int ox = 0; ox < m.out_w; ++ox, ++row) {
        const double* src = x.data() + static_cast<size_t>(row) * cols;
        for (int ky = 0; ky < m.kh; ++ky) {
          const int iy = oy - m.pad_h0 + ky;
          for (int kx = 0; kx < m.kw; ++kx) {
            const int ix = ox - m.pad_w0 + kx;
            if (iy >= 0 && iy < m.in_h && ix >= 0 && ix < m.in_w) {
              double* dst = img + (static_cast<size_t>(iy) * m.in_w + ix) * m.in_c;
              for (int c = 0; c < m.in_c; ++c) dst[c] += src[c];
            }
            src += m.in_c;
          }
        }
      }
    }
  }
  NodeAttrs at;
  at.conv = m;
  return record_unary(Op::kCol2Im, colsT, std::move(out), std::move(at));
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Padding padding) {
  if (input.rank() != 4 || weight.rank() != 4 || bias.rank() != 1)
    shape_fail("conv2d", {input.shape(), weight.shape(), bias.shape()});
  ConvMeta m;
  m.batch = input.dim(0);
  m.in_h = input.dim(1);
  m.in_w = input.dim(2);
  m.in_c = input.dim(3);
  const int f = weight.dim(0);
  m.kh = weight.dim(2);
  m.kw = weight.dim(3);
  if (weight.dim(1) != m.in_c || bias.dim(0) != f)
    shape_fail("conv2d", {input.shape(), weight.shape(), bias.shape()});
  if (padding == Padding::kSame) {
    m.out_h = m.in_h;
    m.out_w = m.in_w;
    m.pad_h0 = (m.kh - 1) / 2;
    m.pad_w0 = (m.kw - 1) / 2;
  } else {
    m.out_h = m.in_h - m.kh + 1;
    m.out_w = m.in_w - m.kw + 1;
    if (m.out_h <= 0 || m.out_w <= 0)
      shape_fail("conv2d", {input.shape(), weight.shape()}, "kernel larger than input");
  }
  // weight [F,C,kh,kw] -> [F, kh*kw*C] matching im2col column order (ky,kx,c).
  // The permutation must stay differentiable w.r.t. the weight, so it is
  // expressed as reshape + take_rows over the flattened kernel entries.
  const int cols = m.kh * m.kw * m.in_c;
  Tensor wflat = reshape(weight, {f * m.in_c * m.kh * m.kw, 1});
  std::vector<int> perm(static_cast<size_t>(f) * cols);
  for (int fi = 0; fi < f; ++fi)
    for (int ky = 0; ky < m.kh; ++ky)
      for (int kx = 0; kx < m.kw; ++kx)
        for (int c = 0; c < m.in_c; ++c)
          perm[static_cast<size_t>(fi) * cols + (ky * m.kw + kx) * m.in_c + c] =
              ((fi * m.in_c + c) * m.kh + ky) * m.kw + kx;
  Tensor wmat = reshape(take_rows(wflat, std::move(perm)), {f, cols});
  Tensor patches = im2col(input, m);
  Tensor out = add_row(matmul(patches, transpose(wmat)), bias);
  return reshape(std::move(out), {m.batch, m.out_h, m.out_w, f});
}

// ---- softmax ----

Tensor softmax_last(const Tensor& a) {
  if (a.rank() != 2) shape_fail("softmax_last", {a.shape()});
  const int r = a.dim(0), n = a.dim(1);
  Tensor out = fresh(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (int i = 0; i < r; ++i) {
    const double* xi = x.data() + static_cast<size_t>(i) * n;
    double* oi = o.data() + static_cast<size_t>(i) * n;
    double mx = xi[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += (oi[j] = std::exp(xi[j] - mx));
    for (int j = 0; j < n; ++j) oi[j] /= s;
  }
  check_finite("softmax_last", o);
  return record_unary(Op::kSoftmaxLast, a, std::move(out), {});
}

Tensor log_softmax_last(const Tensor& a) {
  if (a.rank() != 2) shape_fail("log_softmax_last", {a.shape()});
  // subtracting the detached row max leaves the true gradient unchanged
  Tensor mx = Tensor::from({a.dim(0)}, detached_rowmax(a));
  Tensor z = sub_col(a, mx);
  Tensor lse = log(sum_last(exp(z)));
  return sub_col(std::move(z), std::move(lse));
}

// ---- reductions / broadcasts ----

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  return record_unary(Op::kSumAll, a, std::move(out), {});
}

Tensor mean_all(const Tensor& a) {
  if (a.size() == 0) shape_fail("mean_all", {a.shape()}, "empty");
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s / a.size());
  return record_unary(Op::kMeanAll, a, std::move(out), {});
}

Tensor sum_last(const Tensor& a) {
  if (a.rank() != 2) shape_fail("sum_last", {a.shape()});
  const int r = a.dim(0), n = a.dim(1);
  Tensor out = fresh({r});
  auto o = out.mutable_data();
  auto x = a.data();
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += x[i * n + j];
    o[i] = s;
  }
  check_finite("sum_last", o);
  return record_unary(Op::kSumLast, a, std::move(out), {});
}

Tensor sum_axis0(const Tensor& a) {
  if (a.rank() != 2) shape_fail("sum_axis0", {a.shape()});
  const int r = a.dim(0), n = a.dim(1);
  Tensor out = fresh({n});
  auto o = out.mutable_data();
  auto x = a.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < n; ++j) o[j] += x[i * n + j];
  check_finite("sum_axis0", o);
  return record_unary(Op::kSumAxis0, a, std::move(out), {});
}

Tensor bcast_to(const Tensor& s, const Shape& shape) {
  if (s.size() != 1) shape_fail("bcast_to", {s.shape()}, "source must have one element");
  Tensor out = Tensor::full(shape, s.data()[0]);
  NodeAttrs at;
  at.shape_arg = s.shape();
  return record_unary(Op::kBcastTo, s, std::move(out), std::move(at));
}

Tensor bcast_last(const Tensor& a, int n) {
  if (a.rank() != 1) shape_fail("bcast_last", {a.shape()});
  const int r = a.dim(0);
  Tensor out = fresh({r, n});
  auto o = out.mutable_data();
  auto x = a.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < n; ++j) o[i * n + j] = x[i];
  return record_unary(Op::kBcastLast, a, std::move(out), {});
}

Tensor bcast_axis0(const Tensor& a, int r) {
  if (a.rank() != 1) shape_fail("bcast_axis0", {a.shape()});
  const int n = a.dim(0);
  Tensor out = fresh({r, n});
  auto o = out.mutable_data();
  auto x = a.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < n; ++j) o[i * n + j] = x[j];
  return record_unary(Op::kBcastAxis0, a, std::move(out), {});
}

// ---- shape ops ----

namespace {
// strides for slicing: outer = product of dims before axis, inner = after
void axis_strides(const Shape& s, int axis, int& outer, int& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[i];
}
}  // namespace

Tensor slice(const Tensor& a, int axis, int start, int len) {
  if (axis < 0 || axis >= a.rank() || start < 0 || len < 0 || start + len > a.dim(axis))
    shape_fail("slice", {a.shape()},
               "axis " + std::to_string(axis) + " start " + std::to_string(start) +
                   " len " + std::to_string(len));
  Shape os = a.shape();
  os[axis] = len;
  Tensor out = fresh(os);
  int outer, inner;
  axis_strides(a.shape(), axis, outer, inner);
  const int d = a.dim(axis);
  auto o = out.mutable_data();
  auto x = a.data();
  for (int i = 0; i < outer; ++i)
    for (int j = 0; j < len; ++j)
      std::copy(x.data() + (static_cast<size_t>(i) * d + start + j) * inner,
                x.data() + (static_cast<size_t>(i) * d + start + j + 1) * inner,
                o.data() + (static_cast<size_t>(i) * len + j) * inner);
  NodeAttrs at;
  at.axis = axis;
  at.start = start;
  at.len = len;
  at.shape_arg = a.shape();
  return record_unary(Op::kSlice, a, std::move(out), std::move(at));
}

Tensor unslice(const Tensor& a, int axis, int start, const Shape& full) {
  if (axis < 0 || axis >= static_cast<int>(full.size()) || a.rank() != static_cast<int>(full.size()) ||
      start < 0 || start + a.dim(axis) > full[axis])
    shape_fail("unslice", {a.shape(), full});
  Tensor out = Tensor::zeros(full);
  int outer, inner;
  axis_strides(full, axis, outer, inner);
  const int d = full[axis];
  const int len = a.dim(axis);
  auto o = out.mutable_data();
  auto x = a.data();
  for (int i = 0; i < outer; ++i)
    for (int j = 0; j < len; ++j)
      std::copy(x.data() + (static_cast<size_t>(i) * len + j) * inner,
                x.data() + (static_cast<size_t>(i) * len + j + 1) * inner,
                o.data() + (static_cast<size_t>(i) * d + start + j) * inner);
  NodeAttrs at;
  at.axis = axis;
  at.start = start;
  at.len = len;
  at.shape_arg = full;
  return record_unary(Op::kUnslice, a, std::move(out), std::move(at));
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) shape_fail("concat", {parts[0].shape()});
  Shape os = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) shape_fail("concat", {parts[0].shape(), p.shape()});
    for (int i = 0; i < rank; ++i)
      if (i != axis && p.dim(i) != os[i]) shape_fail("concat", {os, p.shape()});
    total += p.dim(axis);
  }
  os[axis] = total;
  Tensor out = fresh(os);
  int outer, inner;
  axis_strides(os, axis, outer, inner);
  auto o = out.mutable_data();
  int off = 0;
  for (const auto& p : parts) {
    const int len = p.dim(axis);
    auto x = p.data();
    for (int i = 0; i < outer; ++i)
      for (int j = 0; j < len; ++j)
        std::copy(x.data() + (static_cast<size_t>(i) * len + j) * inner,
                  x.data() + (static_cast<size_t>(i) * len + j + 1) * inner,
                  o.data() + (static_cast<size_t>(i) * total + off + j) * inner);
    off += len;
  }
  NodeAttrs at;
  at.axis = axis;
  return record_nary(Op::kConcat, parts, std::move(out), std::move(at));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) shape_fail("reshape", {a.shape(), shape});
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  NodeAttrs at;
  at.shape_arg = a.shape();
  return record_unary(Op::kReshape, a, std::move(out), std::move(at));
}

// ---- gather/scatter ----

Tensor gather_last(const Tensor& a, std::vector<int> idx) {
  if (a.rank() != 2 || static_cast<int>(idx.size()) != a.dim(0))
    shape_fail("gather_last", {a.shape()}, "idx size " + std::to_string(idx.size()));
  const int r = a.dim(0), n = a.dim(1);
  Tensor out = fresh({r});
  auto o = out.mutable_data();
  auto x = a.data();
  for (int i = 0; i < r; ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw ShapeError("gather_last: index out of range");
    o[i] = x[static_cast<size_t>(i) * n + idx[i]];
  }
  NodeAttrs at;
  at.idx = std::move(idx);
  at.len = n;
  return record_unary(Op::kGatherLast, a, std::move(out), std::move(at));
}

Tensor scatter_last(const Tensor& a, std::vector<int> idx, int n) {
  if (a.rank() != 1 || static_cast<int>(idx.size()) != a.dim(0))
    shape_fail("scatter_last", {a.shape()});
  const int r = a.dim(0);
  Tensor out = Tensor::zeros({r, n});
  auto o = out.mutable_data();
  auto x = a.data();
  for (int i = 0; i < r; ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw ShapeError("scatter_last: index out of range");
    o[static_cast<size_t>(i) * n + idx[i]] = x[i];
  }
  NodeAttrs at;
  at.idx = std::move(idx);
  at.len = n;
  return record_unary(Op::kScatterLast, a, std::move(out), std::move(at));
}

Tensor take_rows(const Tensor& a, std::vector<int> idx) {
  if (a.rank() < 1) shape_fail("take_rows", {a.shape()});
  const int r = a.dim(0);
  const int inner = r == 0 ? 0 : a.size() / std::max(r, 1);
  Shape os = a.shape();
  os[0] = static_cast<int>(idx.size());
  Tensor out = fresh(os);
  auto o = out.mutable_data();
  auto x = a.data();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= r) throw ShapeError("take_rows: index out of range");
    std::copy(x.data() + static_cast<size_t>(idx[i]) * inner,
              x.data() + (static_cast<size_t>(idx[i]) + 1) * inner,
              o.data() + i * inner);
  }
  NodeAttrs at;
  at.idx = std::move(idx);
  at.len = r;
  return record_unary(Op::kTakeRows, a, std::move(out), std::move(at));
}

Tensor scatter_rows(const Tensor& a, std::vector<int> idx, int rows) {
  if (a.rank() < 1 || static_cast<int>(idx.size()) != a.dim(0))
    shape_fail("scatter_rows", {a.shape()});
  const int s = a.dim(0);
  const int inner = s == 0 ? 0 : a.size() / std::max(s, 1);
  Shape os = a.shape();
  os[0] = rows;
  Tensor out = Tensor::zeros(os);
  auto o = out.mutable_data();
  auto x = a.data();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) throw ShapeError("scatter_rows: index out of range");
    double* dst = o.data() + static_cast<size_t>(idx[i]) * inner;
    const double* src = x.data() + i * inner;
    for (int j = 0; j < inner; ++j) dst[j] += src[j];
  }
  NodeAttrs at;
  at.idx = std::move(idx);
  at.len = rows;
  return record_unary(Op::kScatterRows, a, std::move(out), std::move(at));
}

// ---- scalar-tensor broadcast ----

namespace {
template <typename F>
Tensor bs_op(Op op, const char* name, const Tensor& a, const Tensor& s, F f) {
  if (s.size() != 1) shape_fail(name, {a.shape(), s.shape()}, "rhs must be scalar-shaped");
  const double c = s.data()[0];
  Tensor out = fresh(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], c);
  check_finite(name, o);
  return record_binary(op, a, s, std::move(out), {});
}
}  // namespace

Tensor mul_bs(const Tensor& a, const Tensor& s) {
  return bs_op(Op::kMulBS, "mul_bs", a, s, [](double x, double c) { return x * c; });
}
Tensor add_bs(const Tensor& a, const Tensor& s) {
  return bs_op(Op::kAddBS, "add_bs", a, s, [](double x, double c) { return x + c; });
}

Tensor stop_gradient(const Tensor& a) { return a.detached(); }

// ---- detached helpers ----

double detached_max(const Tensor& a) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : a.data()) m = std::max(m, v);
  return m;
}

std::vector<double> detached_rowmax(const Tensor& a) {
  const int r = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(r));
  auto x = a.data();
  for (int i = 0; i < r; ++i) {
    double m = x[static_cast<size_t>(i) * n];
    for (int j = 1; j < n; ++j) m = std::max(m, x[static_cast<size_t>(i) * n + j]);
    out[i] = m;
  }
  return out;
}

double l2_norm(std::span<const Tensor> ts) {
  double s = 0.0;
  for (const auto& t : ts)
    for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

// ---- backward ----

namespace {

// Adjoints for each input of a node, expressed through the public ops so the
// result is itself differentiable when recording is active.
std::vector<Tensor> vjp_node(const Tape::Node& n, const Tensor& g) {
  const auto& s = n.saved;
  switch (n.op) {
    case Op::kLeaf: return {};
    case Op::kAdd: return {g, g};
    case Op::kSub: return {g, neg(g)};
    case Op::kMul: return {mul(g, s[1]), mul(g, s[0])};
    case Op::kDiv: return {div(g, s[1]), neg(mul(g, div(n.output, s[1])))};
    case Op::kNeg: return {neg(g)};
    case Op::kSMul: return {smul(g, n.attrs.p)};
    case Op::kSAdd: return {g};
    case Op::kAddRow: return {g, sum_axis0(g)};
    case Op::kSubCol: return {g, neg(sum_last(g))};
    case Op::kAddCol: return {g, sum_last(g)};
    case Op::kMulCol: return {mul_col(g, s[1]), sum_last(mul(g, s[0]))};
    case Op::kMatMul: return {matmul(g, transpose(s[1])), matmul(transpose(s[0]), g)};
    case Op::kTranspose: return {transpose(g)};
    case Op::kIm2Col: return {col2im(g, n.attrs.conv)};
    case Op::kCol2Im: return {im2col(g, n.attrs.conv)};
    case Op::kRelu: {
      std::vector<double> mask(s[0].data().begin(), s[0].data().end());
      for (auto& v : mask) v = v > 0.0 ? 1.0 : 0.0;
      return {mul(g, Tensor::from(s[0].shape(), std::move(mask)))};
    }
    case Op::kArctan: return {div(g, sadd(mul(s[0], s[0]), 1.0))};
    case Op::kSigmoid: return {mul(g, mul(n.output, sadd(neg(n.output), 1.0)))};
    case Op::kLog: return {div(g, s[0])};
    case Op::kExp: return {mul(g, n.output)};
    case Op::kSqrt: return {div(smul(g, 0.5), n.output)};
    case Op::kPowScalar: {
      const double p = n.attrs.p;
      if (p == 0.0) return {smul(g, 0.0)};
      return {smul(mul(g, pow_scalar(s[0], p - 1.0)), p)};
    }
    case Op::kPowExps: {
      std::vector<double> em1(n.attrs.exps.size());
      for (size_t i = 0; i < em1.size(); ++i)
        em1[i] = n.attrs.exps[i] == 0.0 ? 0.0 : n.attrs.exps[i] - 1.0;
      Tensor coef = Tensor::from(s[0].shape(), std::vector<double>(n.attrs.exps));
      return {mul(mul(g, coef), pow_exps(s[0], std::move(em1)))};
    }
    case Op::kSoftmaxLast: {
      Tensor gp = mul(g, n.output);
      Tensor dot = sum_last(gp);
      return {sub(std::move(gp), mul_col(n.output, std::move(dot)))};
    }
    case Op::kSumAll: return {bcast_to(g, s[0].shape())};
    case Op::kMeanAll: return {smul(bcast_to(g, s[0].shape()), 1.0 / s[0].size())};
    case Op::kSumLast: return {bcast_last(g, s[0].dim(1))};
    case Op::kSumAxis0: return {bcast_axis0(g, s[0].dim(0))};
    case Op::kBcastTo: return {reshape(sum_all(g), n.attrs.shape_arg)};
    case Op::kBcastLast: return {sum_last(g)};
    case Op::kBcastAxis0: return {sum_axis0(g)};
    case Op::kSlice: return {unslice(g, n.attrs.axis, n.attrs.start, n.attrs.shape_arg)};
    case Op::kUnslice: return {slice(g, n.attrs.axis, n.attrs.start, n.attrs.len)};
    case Op::kConcat: {
      std::vector<Tensor> out;
      out.reserve(s.size());
      int off = 0;
      for (const auto& part : s) {
        out.push_back(slice(g, n.attrs.axis, off, part.dim(n.attrs.axis)));
        off += part.dim(n.attrs.axis);
      }
      return out;
    }
    case Op::kReshape: return {reshape(g, n.attrs.shape_arg)};
    case Op::kGatherLast: return {scatter_last(g, n.attrs.idx, n.attrs.len)};
    case Op::kScatterLast: return {gather_last(g, n.attrs.idx)};
    case Op::kTakeRows: return {scatter_rows(g, n.attrs.idx, n.attrs.len)};
    case Op::kScatterRows: return {take_rows(g, n.attrs.idx)};
    case Op::kMulBS:
      return {mul_bs(g, s[1]), reshape(sum_all(mul(g, s[0])), s[1].shape())};
    case Op::kAddBS: return {g, reshape(sum_all(g), s[1].shape())};
  }
  throw std::logic_error("vjp_node: unhandled op");
}

}  // namespace

bool GradResult::all_connected() const {
  for (bool c : connected)
    if (!c) return false;
  return true;
}

class GradRun {
 public:
  static GradResult run(const Tensor& scalar, std::span<const Tensor> wrt, GradOptions opts) {
    if (!scalar.shape().empty())
      throw ShapeError("grad: objective must be scalar, got " + shape_str(scalar.shape()));
    Tape* tape = g_current;
    GradResult res;
    res.grads.resize(wrt.size());
    res.connected.assign(wrt.size(), false);
    const bool scalar_live = tape && live_on(scalar, tape);
    if (!scalar_live) {
      // constant objective: every gradient is zero / disconnected
      for (size_t i = 0; i < wrt.size(); ++i) res.grads[i] = Tensor::zeros(wrt[i].shape());
      return res;
    }
    const int snapshot = tape->num_nodes();
    std::vector<Tensor> adj(static_cast<size_t>(snapshot));
    adj[static_cast<size_t>(scalar.impl()->node)] = Tensor::scalar(1.0);

    {
      std::unique_ptr<RecordPause> pause;
      if (!opts.create_graph) pause = std::make_unique<RecordPause>();
      for (int i = scalar.impl()->node; i >= 0; --i) {
        if (!adj[static_cast<size_t>(i)].defined()) continue;
        // copy: vjp ops may append to the tape and reallocate the node vector
        const Tape::Node node = tape->node(i);
        if (node.op == Op::kLeaf) continue;
        const Tensor g = adj[static_cast<size_t>(i)];
        std::vector<Tensor> vjps = vjp_node(node, g);
        for (size_t j = 0; j < node.inputs.size(); ++j) {
          const int id = node.inputs[j];
          if (id < 0) continue;
          auto& slot = adj[static_cast<size_t>(id)];
          slot = slot.defined() ? add(slot, vjps[j]) : vjps[j];
        }
      }
    }

    for (size_t i = 0; i < wrt.size(); ++i) {
      const auto impl = wrt[i].impl();
      const bool on = live_on(wrt[i], tape) && impl->node < snapshot;
      if (on && adj[static_cast<size_t>(impl->node)].defined()) {
        res.grads[i] = adj[static_cast<size_t>(impl->node)];
        res.connected[i] = true;
      } else {
        res.grads[i] = Tensor::zeros(wrt[i].shape());
      }
    }
    return res;
  }
};

GradResult grad(const Tensor& scalar, std::span<const Tensor> wrt, GradOptions opts) {
  return GradRun::run(scalar, wrt, opts);
}

}  // namespace modac::ad
