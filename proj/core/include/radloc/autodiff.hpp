#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tensor is a handle to a node in a dynamically built graph. Operations on
// tensors that require gradients record a backward closure; Tensor::backward()
// replays those closures in reverse topological order. Layout is row-major,
// image tensors are NCHW.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace radloc::ad {

using Shape = std::vector<int>;

std::size_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  /// Accumulated gradient; zeros when none has been accumulated.
  std::vector<double> grad() const;
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;
  double at(std::size_t i) const { return node_->value[i]; }

  /// Back-propagates from this tensor. Non-scalar roots need an explicit seed.
  void backward() const;
  void backward(std::span<const double> seed) const;
  void zero_grad() const;

  /// Same values, detached from the graph.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// True unless a NoGradGuard is active on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// While alive, records on this thread which branch every non-differentiable
/// operation took (relu and clamp sides, max-pool winners, angle wraps,
/// bilinear cells). Two evaluations with equal traces lie on one smooth piece
/// of the function, so a finite difference between them is meaningful.
class KinkTrace {
 public:
  KinkTrace();
  ~KinkTrace();
  KinkTrace(const KinkTrace&) = delete;
  KinkTrace& operator=(const KinkTrace&) = delete;

  /// Order-sensitive hash of every recorded branch.
  std::uint64_t digest() const { return digest_; }
  std::size_t count() const { return count_; }
  bool same_path(const KinkTrace& o) const { return digest_ == o.digest_ && count_ == o.count_; }

 private:
  friend void record_branch(std::int64_t id);
  std::uint64_t digest_ = 1469598103934665603ull;
  std::size_t count_ = 0;
  KinkTrace* prev_;
};

/// True when a KinkTrace is active on this thread.
bool kink_tracing();
/// Appends a branch id to the active trace (no-op otherwise).
void record_branch(std::int64_t id);

/// Builds an op node from precomputed values; backward receives the output
/// node and accumulates into inputs via Node::ensure_grad.
Tensor custom_op(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                 std::function<void(const Node&)> backward);

// ---------------------------------------------------------------- elementwise
// Binary ops accept equal shapes, or one operand with a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
/// log(max(a, floor)); the gradient is zero where a < floor.
Tensor log_clamped(const Tensor& a, double floor);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor square(const Tensor& a);
/// max(a, floor) elementwise.
Tensor clamp_min(const Tensor& a, double floor);
/// Wraps to (-pi, pi]; derivative is 1 almost everywhere.
Tensor wrap_angle(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }

// ------------------------------------------------------------ shape & reduce
Tensor reshape(const Tensor& a, Shape shape);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Single element as a scalar tensor.
Tensor index(const Tensor& a, std::size_t i);
/// Packs scalar tensors into one tensor of the given shape.
Tensor stack(const std::vector<Tensor>& scalars, Shape shape);
/// Rows [begin, end) of a tensor along its first dimension.
Tensor slice_rows(const Tensor& a, int begin, int end);
/// Concatenates along the first dimension.
Tensor concat_rows(const std::vector<Tensor>& parts);

// -------------------------------------------------------------- small linalg
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor inverse(const Tensor& a);
Tensor det(const Tensor& a);

// --------------------------------------------------------------- row-wise ops
/// x[B, n] -> softmax(-x / tau) per row, computed with max subtraction.
Tensor softmin_rows(const Tensor& x, double tau);
/// x[B, n] . w for a constant w of length n -> [B]
Tensor row_dot(const Tensor& x, std::span<const double> w);
/// v[B, nx*ny*nt] (row-major i, j, k) -> sums over the other two axes: [B, n_axis]
Tensor axis_marginal(const Tensor& v, int nx, int ny, int nt, int axis);

// ---------------------------------------------------------------- image ops
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor max_pool2x2(const Tensor& x);
Tensor upsample_nearest2x(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor instance_norm(const Tensor& x, double eps = 1e-5);

/// Running statistics of a batch-norm layer; mutated by training-mode passes.
struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;
};

/// Training mode normalizes with batch statistics over (N, H, W) and, when
/// stats is non-null, updates the running statistics. Eval mode uses them.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats* stats,
                  bool training, double momentum = 0.1, double eps = 1e-5);

/// a[B, 1, H, W] - b[B, C, H, W], broadcasting a across channels.
Tensor sub_broadcast_channels(const Tensor& a, const Tensor& b);
/// x[B, C, H, W] -> [B*k*k, C, H/k, W/k]; patch p = (row block, col block) row-major.
Tensor patchify(const Tensor& x, int k);
/// x[N, C, H, W] -> [N, C] spatial mean.
Tensor mean_spatial(const Tensor& x);
/// x[B*g, C] -> [B, C] mean over consecutive groups of g rows.
Tensor group_mean(const Tensor& x, int g);

/// Sparse linear resampling: out[b, m, p] = sum over taps of w * x[b, 0, src].
/// Taps are stored per output channel m and pixel p, four per pixel (src < 0
/// means no contribution).
struct ResamplePlan {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<int> src;     // channels * height * width * 4
  std::vector<double> wts;  // same layout
};
Tensor resample(const Tensor& x, std::shared_ptr<const ResamplePlan> plan);

}  // namespace radloc::ad
