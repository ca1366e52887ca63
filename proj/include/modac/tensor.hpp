#pragma once

// Reverse-mode automatic differentiation over dense 64-bit tensors.
//
// Ops record onto an ambient Tape (opened with Tape::Scope). The backward
// pass expresses every vector-Jacobian product in terms of the same public
// ops, so calling grad() with create_graph=true leaves the gradients on the
// tape and a second grad() over an expression of them is valid. That is the
// whole mechanism behind differentiating through optimizer updates.

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace modac::ad {

using Shape = std::vector<int>;

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

std::string shape_str(const Shape& s);
int shape_size(const Shape& s);

class Tape;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  // Where this tensor last appeared as a tape value. tape_gen guards
  // against a stale pointer after the tape is destroyed.
  Tape* tape = nullptr;
  std::uint64_t tape_gen = 0;
  int node = -1;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor scalar(double v);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  // leaf parameter: participates in grad() even without prior tape nodes
  static Tensor param(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int size() const { return static_cast<int>(impl_->data.size()); }
  int dim(int i) const { return impl_->shape[i]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;                         // requires scalar shape
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  // value-identical tensor detached from any tape; contributes no gradient
  Tensor detached() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd, kSub, kMul, kDiv, kNeg,
  kSMul, kSAdd,               // scalar constant
  kAddRow, kSubCol, kAddCol, kMulCol,
  kMatMul, kTranspose,
  kIm2Col, kCol2Im,
  kRelu, kArctan, kSigmoid, kLog, kExp, kSqrt,
  kPowScalar, kPowExps,
  kSoftmaxLast,
  kSumAll, kMeanAll, kSumLast, kSumAxis0,
  kBcastTo, kBcastLast, kBcastAxis0,
  kSlice, kUnslice, kConcat, kReshape,
  kGatherLast, kScatterLast, kTakeRows, kScatterRows,
  kMulBS, kAddBS,             // broadcast of a scalar tensor
};

const char* op_name(Op op);

struct ConvMeta {
  int batch = 0, in_c = 0, in_h = 0, in_w = 0;
  int kh = 0, kw = 0;
  int pad_h0 = 0, pad_w0 = 0;  // "same" padding amounts (top/left)
  int out_h = 0, out_w = 0;
};

struct NodeAttrs {
  int axis = 0, start = 0, len = 0;
  double p = 0.0;
  std::vector<double> exps;   // kPowExps
  std::vector<int> idx;       // gather/scatter/take indices
  Shape shape_arg;            // reshape target / bcast target / unslice full shape
  ConvMeta conv;
};

// Append-only record of executed ops. Nodes are in topological order by
// construction; backward over a tape may itself append (create_graph).
class Tape {
 public:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<int> inputs;             // node ids
    std::vector<Tensor> saved;           // input tensors (values for vjp)
    Tensor output;
    NodeAttrs attrs;
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int i) const { return nodes_[i]; }
  std::uint64_t generation() const { return gen_; }

  // Opens this tape as the thread's recording target.
  class Scope {
   public:
    explicit Scope(Tape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
   private:
    Tape* prev_;
  };

  static Tape* current();

 private:
  friend class RecordPause;
  friend Tensor record_unary(Op, const Tensor&, Tensor, NodeAttrs);
  friend Tensor record_binary(Op, const Tensor&, const Tensor&, Tensor, NodeAttrs);
  friend Tensor record_nary(Op, std::span<const Tensor>, Tensor, NodeAttrs);
  friend struct GradWorkspace;
  friend class GradRun;

  int ensure_on_tape(const Tensor& t);  // materialises a leaf node if needed
  std::vector<Node> nodes_;
  std::uint64_t gen_ = 0;
};

// Temporarily suspends recording (used for create_graph=false backward and
// for any detached bookkeeping arithmetic).
class RecordPause {
 public:
  RecordPause();
  ~RecordPause();
  RecordPause(const RecordPause&) = delete;
  RecordPause& operator=(const RecordPause&) = delete;
 private:
  bool prev_;
};

// ---- forward ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor smul(const Tensor& a, double c);
Tensor sadd(const Tensor& a, double c);

Tensor add_row(const Tensor& a, const Tensor& row);    // [R,N] + [N]
Tensor add_col(const Tensor& a, const Tensor& col);    // [R,N] + [R] per column
Tensor sub_col(const Tensor& a, const Tensor& col);
Tensor mul_col(const Tensor& a, const Tensor& col);

Tensor matmul(const Tensor& a, const Tensor& b);       // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                     // 2-D

enum class Padding { kValid, kSame };
// Channels-last convolution. input [B,H,W,C], weight [F,C,kh,kw], stride 1;
// composite of im2col + matmul + add_row, result [B,H',W',F].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Padding padding);
Tensor im2col(const Tensor& input, const ConvMeta& meta);
Tensor col2im(const Tensor& cols, const ConvMeta& meta);

Tensor relu(const Tensor& a);
Tensor arctan(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
// elementwise a[i]^exps[i] with constant exponents (entries with exps==0 give 1)
Tensor pow_exps(const Tensor& a, std::vector<double> exps);

Tensor softmax_last(const Tensor& a);   // over the last axis, max-subtracted
Tensor log_softmax_last(const Tensor& a);  // composite, stable

Tensor sum_all(const Tensor& a);        // -> scalar
Tensor mean_all(const Tensor& a);
Tensor sum_last(const Tensor& a);       // [R,N] -> [R]
Tensor sum_axis0(const Tensor& a);      // [R,N] -> [N]

Tensor bcast_to(const Tensor& scalar_or_1, const Shape& shape);
Tensor bcast_last(const Tensor& a, int n);   // [R] -> [R,n]
Tensor bcast_axis0(const Tensor& a, int r);  // [N] -> [r,N]

Tensor slice(const Tensor& a, int axis, int start, int len);
// zeros of `full` shape with `a` written at [start, start+len) along axis
Tensor unslice(const Tensor& a, int axis, int start, const Shape& full);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor reshape(const Tensor& a, Shape shape);

Tensor gather_last(const Tensor& a, std::vector<int> idx);     // [R,N],[R] -> [R]
Tensor scatter_last(const Tensor& a, std::vector<int> idx, int n);  // [R] -> [R,n]
Tensor take_rows(const Tensor& a, std::vector<int> idx);       // [R,...] -> [S,...]
Tensor scatter_rows(const Tensor& a, std::vector<int> idx, int rows);

Tensor mul_bs(const Tensor& a, const Tensor& s);  // a * scalar-shaped s
Tensor add_bs(const Tensor& a, const Tensor& s);

Tensor stop_gradient(const Tensor& a);

// detached helpers (never record)
double detached_max(const Tensor& a);
std::vector<double> detached_rowmax(const Tensor& a);  // [R,N] -> per-row max
double l2_norm(std::span<const Tensor> ts);

// ---- backward ----

struct GradOptions {
  bool create_graph = false;
};

struct GradResult {
  std::vector<Tensor> grads;      // one per wrt entry, zeros when disconnected
  std::vector<bool> connected;    // false => the wrt tensor never reached scalar
  bool all_connected() const;
};

// d(scalar)/d(wrt[i]). scalar must have shape [] and live on the current tape.
GradResult grad(const Tensor& scalar, std::span<const Tensor> wrt,
                GradOptions opts = {});

// global toggle for post-op finite checks (default on)
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

}  // namespace modac::ad
