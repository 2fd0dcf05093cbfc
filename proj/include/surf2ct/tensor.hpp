#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gemm.hpp"

namespace surf2ct {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major array with an optional gradient buffer. Copies share storage; the
// shape never changes after construction.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : impl_(std::make_shared<Impl>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(shape_numel(impl_->shape), fill);
  }
  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor: buffer of " + std::to_string(data.size()) +
                       " elements does not match shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor scalar(T v) { return Tensor(Shape{}, v); }
  static Tensor zeros_like(const Tensor& t) { return zeros(t.shape()); }
  static Tensor ones_like(const Tensor& t) { return ones(t.shape()); }

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  std::vector<T>& storage() { return impl_->data; }
  const std::vector<T>& storage() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  // Gradient state is shared by every handle, so it stays writable through const handles.
  std::span<T> grad() const { return impl_->grad; }
  std::vector<T>& grad_storage() const { return impl_->grad; }
  // Allocates a zero gradient buffer on first use.
  std::span<T> grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), T{0});
    return impl_->grad;
  }
  void zero_grad() const {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
  }
  void reset_grad() { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor out(shape(), impl_->data);
    return out;
  }

  bool same(const Tensor& other) const { return impl_ == other.impl_; }

  // Marks a freshly computed tensor as an interior graph node.
  void mark_interior(bool needs_grad) {
    impl_->is_leaf = false;
    impl_->requires_grad = needs_grad;
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
  };
  std::shared_ptr<Impl> impl_;
};

// Define-by-run operation record. Entries are appended in execution order, so the
// list is topologically sorted by construction.
template <class T>
class Tape {
 public:
  struct Entry {
    std::string name;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  void record(std::string name, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward) {
    entries_.push_back({std::move(name), std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  // Interior gradients are reset on every call; leaf gradients accumulate, so two
  // calls without zeroing double them.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (entries_.empty()) throw std::logic_error("backward: tape is empty");
    for (auto& e : entries_) {
      auto& g = e.output.grad_storage();
      g.assign(e.output.numel(), T{0});
    }
    Tensor<T> l = loss;
    l.grad_buffer()[0] += T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

 private:
  std::vector<Entry> entries_;
};

template <class T>
Tape<T>*& active_tape() {
  static thread_local Tape<T>* tape = nullptr;
  return tape;
}

// Operations executed while a Recording is alive are appended to its tape.
template <class T>
class Recording {
 public:
  explicit Recording(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~Recording() { active_tape<T>() = previous_; }
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <class T>
Tape<T>* tape_for(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) return nullptr;
  for (auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat index into a broadcast operand for every element of the output shape.
inline std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  const std::size_t off = rank - in.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > off;) {
    const std::size_t d = in[i - off];
    stride[i] = d == 1 ? 0 : s;
    s *= d;
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t cur = 0;
  for (std::size_t k = 0; k < n; ++k) {
    idx[k] = cur;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      cur += stride[d];
      if (counter[d] < out[d]) break;
      cur -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

template <class T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

}  // namespace detail

enum class OpKind { add, sub, mul, div, neg, silu, square, sigmoid };

inline bool is_binary(OpKind k) {
  return k == OpKind::add || k == OpKind::sub || k == OpKind::mul || k == OpKind::div;
}

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::neg: return "neg";
    case OpKind::silu: return "silu";
    case OpKind::square: return "square";
    case OpKind::sigmoid: return "sigmoid";
  }
  return "?";
}

// Elementwise unary or binary operation with trailing-dimension broadcasting.
template <class T>
Tensor<T> elementwise(OpKind kind, const Tensor<T>& a, const Tensor<T>& b = Tensor<T>{}) {
  using detail::sigmoid;
  if (is_binary(kind)) {
    if (!b.defined()) throw std::invalid_argument(std::string(op_name(kind)) + ": missing operand");
    const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
    const bool same = a.shape() == b.shape();
    Tensor<T> out(out_shape);
    const std::size_t n = out.numel();
    std::vector<std::size_t> ia, ib;
    if (!same) {
      ia = detail::broadcast_index(out_shape, a.shape());
      ib = detail::broadcast_index(out_shape, b.shape());
    }
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    auto at_a = [&](std::size_t k) { return same ? k : ia[k]; };
    auto at_b = [&](std::size_t k) { return same ? k : ib[k]; };
    switch (kind) {
      case OpKind::add: for (std::size_t k = 0; k < n; ++k) po[k] = pa[at_a(k)] + pb[at_b(k)]; break;
      case OpKind::sub: for (std::size_t k = 0; k < n; ++k) po[k] = pa[at_a(k)] - pb[at_b(k)]; break;
      case OpKind::mul: for (std::size_t k = 0; k < n; ++k) po[k] = pa[at_a(k)] * pb[at_b(k)]; break;
      case OpKind::div: for (std::size_t k = 0; k < n; ++k) po[k] = pa[at_a(k)] / pb[at_b(k)]; break;
      default: break;
    }
    if (auto* tape = detail::tape_for<T>({&a, &b})) {
      out.mark_interior(true);
      tape->record(op_name(kind), {a, b}, out,
                   [kind, a, b, out, same, ia = std::move(ia), ib = std::move(ib)]() mutable {
                     const auto g = out.grad();
                     const std::size_t n = g.size();
                     auto at_a = [&](std::size_t k) { return same ? k : ia[k]; };
                     auto at_b = [&](std::size_t k) { return same ? k : ib[k]; };
                     const T* pa = a.ptr();
                     const T* pb = b.ptr();
                     if (a.requires_grad()) {
                       auto ga = a.grad_buffer();
                       for (std::size_t k = 0; k < n; ++k) {
                         T d;
                         switch (kind) {
                           case OpKind::add: d = g[k]; break;
                           case OpKind::sub: d = g[k]; break;
                           case OpKind::mul: d = g[k] * pb[at_b(k)]; break;
                           default: d = g[k] / pb[at_b(k)]; break;
                         }
                         ga[at_a(k)] += d;
                       }
                     }
                     if (b.requires_grad()) {
                       auto gb = b.grad_buffer();
                       for (std::size_t k = 0; k < n; ++k) {
                         T d;
                         switch (kind) {
                           case OpKind::add: d = g[k]; break;
                           case OpKind::sub: d = -g[k]; break;
                           case OpKind::mul: d = g[k] * pa[at_a(k)]; break;
                           default: {
                             const T bv = pb[at_b(k)];
                             d = -g[k] * pa[at_a(k)] / (bv * bv);
                           }
                         }
                         gb[at_b(k)] += d;
                       }
                     }
                   });
    }
    return out;
  }

  if (b.defined())
    throw std::invalid_argument(std::string(op_name(kind)) + ": unary op given two operands");
  Tensor<T> out(a.shape());
  const std::size_t n = out.numel();
  const T* pa = a.ptr();
  T* po = out.ptr();
  switch (kind) {
    case OpKind::neg: for (std::size_t k = 0; k < n; ++k) po[k] = -pa[k]; break;
    case OpKind::silu: for (std::size_t k = 0; k < n; ++k) po[k] = pa[k] * sigmoid(pa[k]); break;
    case OpKind::square: for (std::size_t k = 0; k < n; ++k) po[k] = pa[k] * pa[k]; break;
    case OpKind::sigmoid: for (std::size_t k = 0; k < n; ++k) po[k] = sigmoid(pa[k]); break;
    default: break;
  }
  if (auto* tape = detail::tape_for<T>({&a})) {
    out.mark_interior(true);
    tape->record(op_name(kind), {a}, out, [kind, a, out]() mutable {
      const auto g = out.grad();
      auto ga = a.grad_buffer();
      const T* pa = a.ptr();
      const T* po = out.ptr();
      const std::size_t n = g.size();
      switch (kind) {
        case OpKind::neg: for (std::size_t k = 0; k < n; ++k) ga[k] -= g[k]; break;
        case OpKind::silu:
          for (std::size_t k = 0; k < n; ++k) {
            const T s = sigmoid(pa[k]);
            ga[k] += g[k] * (s + pa[k] * s * (T{1} - s));
          }
          break;
        case OpKind::square: for (std::size_t k = 0; k < n; ++k) ga[k] += g[k] * T{2} * pa[k]; break;
        case OpKind::sigmoid:
          for (std::size_t k = 0; k < n; ++k) ga[k] += g[k] * po[k] * (T{1} - po[k]);
          break;
        default: break;
      }
    });
  }
  return out;
}

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(OpKind::add, a, b); }
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(OpKind::sub, a, b); }
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(OpKind::mul, a, b); }
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(OpKind::div, a, b); }
template <class T> Tensor<T> neg(const Tensor<T>& a) { return elementwise(OpKind::neg, a); }
template <class T> Tensor<T> silu(const Tensor<T>& a) { return elementwise(OpKind::silu, a); }
template <class T> Tensor<T> square(const Tensor<T>& a) { return elementwise(OpKind::square, a); }

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t k = 0; k < a.numel(); ++k) out.ptr()[k] = a.ptr()[k] * s;
  if (auto* tape = detail::tape_for<T>({&a})) {
    out.mark_interior(true);
    tape->record("scale", {a}, out, [a, out, s]() mutable {
      auto ga = a.grad_buffer();
      const auto g = out.grad();
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * s;
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc{0};
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (auto* tape = detail::tape_for<T>({&a})) {
    out.mark_interior(true);
    tape->record("sum", {a}, out, [a, out]() mutable {
      auto ga = a.grad_buffer();
      const T g = out.grad()[0];
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

// Mean over all elements of (pred - target)^2, accumulated in double.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  const std::size_t n = pred.numel();
  double acc = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double d = static_cast<double>(pred.ptr()[k]) - static_cast<double>(target.ptr()[k]);
    acc += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (auto* tape = detail::tape_for<T>({&pred, &target})) {
    out.mark_interior(true);
    tape->record("mse_loss", {pred, target}, out, [pred, target, out, n]() mutable {
      const T g = out.grad()[0] * T{2} / static_cast<T>(n);
      const T* pp = pred.ptr();
      const T* pt = target.ptr();
      if (pred.requires_grad()) {
        auto gp = pred.grad_buffer();
        for (std::size_t k = 0; k < n; ++k) gp[k] += g * (pp[k] - pt[k]);
      }
      if (target.requires_grad()) {
        auto gt = target.grad_buffer();
        for (std::size_t k = 0; k < n; ++k) gt[k] -= g * (pp[k] - pt[k]);
      }
    });
  }
  return out;
}

namespace detail {

struct ConvGeometry {
  std::size_t C, D, H, W;     // input channels and extents
  std::size_t k, stride, pad;
  std::size_t OD, OH, OW;
  std::size_t rows() const { return C * k * k * k; }
  std::size_t cols() const { return OD * OH * OW; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const ConvGeometry& g, const T* in, T* col) {
  const std::size_t P = g.cols();
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t kd = 0; kd < g.k; ++kd)
      for (std::size_t kh = 0; kh < g.k; ++kh)
        for (std::size_t kw = 0; kw < g.k; ++kw) {
          T* row = col + (((c * g.k + kd) * g.k + kh) * g.k + kw) * P;
          for (std::size_t od = 0; od < g.OD; ++od) {
            const long id = static_cast<long>(od * g.stride + kd) - static_cast<long>(g.pad);
            for (std::size_t oh = 0; oh < g.OH; ++oh) {
              T* dst = row + (od * g.OH + oh) * g.OW;
              const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
              if (id < 0 || id >= static_cast<long>(g.D) || ih < 0 || ih >= static_cast<long>(g.H)) {
                std::fill(dst, dst + g.OW, T{0});
                continue;
              }
              const T* src = in + ((c * g.D + id) * g.H + ih) * g.W;
              for (std::size_t ow = 0; ow < g.OW; ++ow) {
                const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
                dst[ow] = (iw < 0 || iw >= static_cast<long>(g.W)) ? T{0} : src[iw];
              }
            }
          }
        }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, T* in) {
  const std::size_t P = g.cols();
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t kd = 0; kd < g.k; ++kd)
      for (std::size_t kh = 0; kh < g.k; ++kh)
        for (std::size_t kw = 0; kw < g.k; ++kw) {
          const T* row = col + (((c * g.k + kd) * g.k + kh) * g.k + kw) * P;
          for (std::size_t od = 0; od < g.OD; ++od) {
            const long id = static_cast<long>(od * g.stride + kd) - static_cast<long>(g.pad);
            if (id < 0 || id >= static_cast<long>(g.D)) continue;
            for (std::size_t oh = 0; oh < g.OH; ++oh) {
              const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
              if (ih < 0 || ih >= static_cast<long>(g.H)) continue;
              const T* src = row + (od * g.OH + oh) * g.OW;
              T* dst = in + ((c * g.D + id) * g.H + ih) * g.W;
              for (std::size_t ow = 0; ow < g.OW; ++ow) {
                const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
                if (iw >= 0 && iw < static_cast<long>(g.W)) dst[iw] += src[ow];
              }
            }
          }
        }
}

}  // namespace detail

// 3D cross-correlation. input [N,C,D,H,W], kernel [K,C,k,k,k] (k odd), bias [K] or
// undefined. Lowered to im2col + GEMM per sample.
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 1) {
  if (input.rank() != 5) throw ShapeError("conv3d: input must be [N,C,D,H,W], got " + shape_str(input.shape()));
  if (kernel.rank() != 5 || kernel.dim(2) != kernel.dim(3) || kernel.dim(3) != kernel.dim(4))
    throw ShapeError("conv3d: kernel must be [K,C,k,k,k], got " + shape_str(kernel.shape()));
  if (kernel.dim(1) != input.dim(1))
    throw ShapeError("conv3d: channel mismatch, input " + shape_str(input.shape()) + " kernel " +
                     shape_str(kernel.shape()));
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv3d: stride must be 1 or 2");
  const std::size_t K = kernel.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != K))
    throw ShapeError("conv3d: bias must be [" + std::to_string(K) + "], got " + shape_str(bias.shape()));
  detail::ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), input.dim(4), kernel.dim(2),
                         stride, padding, 0, 0, 0};
  auto out_extent = [&](std::size_t n) -> std::size_t {
    const long span = static_cast<long>(n + 2 * padding) - static_cast<long>(g.k);
    if (span < 0) return 0;
    return static_cast<std::size_t>(span) / stride + 1;
  };
  g.OD = out_extent(g.D);
  g.OH = out_extent(g.H);
  g.OW = out_extent(g.W);
  if (g.OD == 0 || g.OH == 0 || g.OW == 0)
    throw ShapeError("conv3d: non-positive output extent for input " + shape_str(input.shape()) +
                     " kernel " + shape_str(kernel.shape()));
  const std::size_t N = input.dim(0);
  const std::size_t R = g.rows(), P = g.cols();
  const std::size_t in_stride = g.C * g.D * g.H * g.W;
  Tensor<T> out(Shape{N, K, g.OD, g.OH, g.OW});
  std::vector<T> col(g.pointwise() ? 0 : R * P);
  for (std::size_t n = 0; n < N; ++n) {
    const T* in = input.ptr() + n * in_stride;
    const T* B = in;
    if (!g.pointwise()) {
      detail::im2col(g, in, col.data());
      B = col.data();
    }
    T* o = out.ptr() + n * K * P;
    detail::gemm_nn<T>(K, P, R, kernel.ptr(), R, B, P, o, P, false);
    if (bias.defined())
      for (std::size_t k = 0; k < K; ++k) {
        const T b = bias.ptr()[k];
        for (std::size_t p = 0; p < P; ++p) o[k * P + p] += b;
      }
  }
  if (auto* tape = detail::tape_for<T>({&input, &kernel, &bias})) {
    out.mark_interior(true);
    tape->record("conv3d", {input, kernel, bias}, out, [=]() mutable {
      const auto go = out.grad();
      std::vector<T> colbuf(g.pointwise() ? 0 : R * P);
      std::vector<T> colT(kernel.requires_grad() ? R * P : 0);
      std::vector<T> wT;
      std::vector<T> dcol;
      if (input.requires_grad()) {
        wT.resize(R * K);
        detail::transpose(K, R, kernel.ptr(), wT.data());
        dcol.resize(g.pointwise() ? 0 : R * P);
      }
      for (std::size_t n = 0; n < N; ++n) {
        const T* gn = go.data() + n * K * P;
        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.grad_buffer();
          for (std::size_t k = 0; k < K; ++k) {
            T acc{0};
            for (std::size_t p = 0; p < P; ++p) acc += gn[k * P + p];
            gb[k] += acc;
          }
        }
        if (kernel.requires_grad()) {
          const T* in = input.ptr() + n * in_stride;
          const T* B = in;
          if (!g.pointwise()) {
            detail::im2col(g, in, colbuf.data());
            B = colbuf.data();
          }
          detail::transpose(R, P, B, colT.data());
          detail::gemm_nn<T>(K, R, P, gn, P, colT.data(), R, kernel.grad_buffer().data(), R, true);
        }
        if (input.requires_grad()) {
          T* gi = input.grad_buffer().data() + n * in_stride;
          if (g.pointwise()) {
            detail::gemm_nn<T>(R, P, K, wT.data(), K, gn, P, gi, P, true);
          } else {
            detail::gemm_nn<T>(R, P, K, wT.data(), K, gn, P, dcol.data(), P, false);
            detail::col2im_add(g, dcol.data(), gi);
          }
        }
      }
    });
  }
  return out;
}

// Group normalization over (channels-in-group x spatial) per sample, followed by a
// per-channel affine transform.
template <class T>
Tensor<T> group_norm(const Tensor<T>& input, std::size_t groups, const Tensor<T>& gain,
                     const Tensor<T>& shift, T eps = T(1e-5)) {
  if (input.rank() < 2) throw ShapeError("group_norm: input must be [N,C,...]");
  const std::size_t N = input.dim(0), C = input.dim(1);
  if (groups == 0 || C % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible by " +
                     std::to_string(groups) + " groups");
  if (gain.numel() != C || shift.numel() != C)
    throw ShapeError("group_norm: gain/shift must have " + std::to_string(C) + " elements");
  const std::size_t S = input.numel() / (N * C);
  const std::size_t cpg = C / groups;
  const std::size_t m = cpg * S;
  Tensor<T> out(input.shape());
  std::vector<T> xhat(input.numel());
  std::vector<T> inv_std(N * groups);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (n * C + gi * cpg) * S;
      const T* x = input.ptr() + base;
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) s += x[i];
      const double mu = s / static_cast<double>(m);
      double v = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = x[i] - mu;
        v += d * d;
      }
      v /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(v + static_cast<double>(eps));
      inv_std[n * groups + gi] = static_cast<T>(is);
      for (std::size_t c = 0; c < cpg; ++c) {
        const std::size_t ch = gi * cpg + c;
        const T a = gain.ptr()[ch], b = shift.ptr()[ch];
        for (std::size_t i = 0; i < S; ++i) {
          const std::size_t idx = c * S + i;
          const T xh = static_cast<T>((x[idx] - mu) * is);
          xhat[base + idx] = xh;
          out.ptr()[base + idx] = xh * a + b;
        }
      }
    }
  if (auto* tape = detail::tape_for<T>({&input, &gain, &shift})) {
    out.mark_interior(true);
    tape->record("group_norm", {input, gain, shift}, out,
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
                   const auto go = out.grad();
                   for (std::size_t n = 0; n < N; ++n)
                     for (std::size_t gi = 0; gi < groups; ++gi) {
                       const std::size_t base = (n * C + gi * cpg) * S;
                       double sum_d = 0, sum_dx = 0;
                       for (std::size_t c = 0; c < cpg; ++c) {
                         const std::size_t ch = gi * cpg + c;
                         const T a = gain.ptr()[ch];
                         double gsum = 0, gxsum = 0;
                         for (std::size_t i = 0; i < S; ++i) {
                           const std::size_t idx = base + c * S + i;
                           const double gv = go[idx];
                           gsum += gv;
                           gxsum += gv * xhat[idx];
                           sum_d += gv * a;
                           sum_dx += gv * a * xhat[idx];
                         }
                         if (gain.requires_grad()) gain.grad_buffer()[ch] += static_cast<T>(gxsum);
                         if (shift.requires_grad()) shift.grad_buffer()[ch] += static_cast<T>(gsum);
                       }
                       if (!input.requires_grad()) continue;
                       auto gin = input.grad_buffer();
                       const double md = sum_d / static_cast<double>(m);
                       const double mdx = sum_dx / static_cast<double>(m);
                       const double is = inv_std[n * groups + gi];
                       for (std::size_t c = 0; c < cpg; ++c) {
                         const T a = gain.ptr()[gi * cpg + c];
                         for (std::size_t i = 0; i < S; ++i) {
                           const std::size_t idx = base + c * S + i;
                           const double d = static_cast<double>(go[idx]) * a;
                           gin[idx] += static_cast<T>(is * (d - md - xhat[idx] * mdx));
                         }
                       }
                     }
                 });
  }
  return out;
}

// Concatenation along axis 1 of [N,C_i,...] tensors with equal remaining extents.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Shape& ref = parts[0].shape();
  if (ref.size() < 2) throw ShapeError("concat_channels: rank must be >= 2");
  std::size_t C = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size() && s[0] == ref[0];
    for (std::size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == ref[i];
    if (!ok) throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(ref));
    C += s[1];
  }
  const std::size_t N = ref[0];
  const std::size_t S = parts[0].numel() / (N * ref[1] == 0 ? 1 : N * ref[1]);
  Shape os = ref;
  os[1] = C;
  Tensor<T> out(os);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(p.ptr() + n * c * S, c * S, out.ptr() + (n * C + off) * S);
    off += c;
  }
  Tape<T>* tape = active_tape<T>();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    out.mark_interior(true);
    tape->record("concat", parts, out, [parts, out, N, C, S]() mutable {
      const auto go = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t c = p.dim(1);
        if (p.requires_grad()) {
          auto gp = p.grad_buffer();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < c * S; ++i) gp[n * c * S + i] += go[(n * C + off) * S + i];
        }
        off += c;
      }
    });
  }
  return out;
}

// Nearest-neighbour upsampling of the three trailing axes by an integer factor.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& input, std::size_t factor = 2) {
  if (input.rank() != 5) throw ShapeError("upsample_nearest: input must be [N,C,D,H,W]");
  const std::size_t NC = input.dim(0) * input.dim(1);
  const std::size_t D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const std::size_t OD = D * factor, OH = H * factor, OW = W * factor;
  Tensor<T> out(Shape{input.dim(0), input.dim(1), OD, OH, OW});
  for (std::size_t c = 0; c < NC; ++c) {
    const T* in = input.ptr() + c * D * H * W;
    T* o = out.ptr() + c * OD * OH * OW;
    for (std::size_t d = 0; d < OD; ++d)
      for (std::size_t h = 0; h < OH; ++h) {
        const T* src = in + ((d / factor) * H + h / factor) * W;
        T* dst = o + (d * OH + h) * OW;
        for (std::size_t w = 0; w < OW; ++w) dst[w] = src[w / factor];
      }
  }
  if (auto* tape = detail::tape_for<T>({&input})) {
    out.mark_interior(true);
    tape->record("upsample_nearest", {input}, out, [=]() mutable {
      const auto go = out.grad();
      auto gi = input.grad_buffer();
      for (std::size_t c = 0; c < NC; ++c)
        for (std::size_t d = 0; d < OD; ++d)
          for (std::size_t h = 0; h < OH; ++h) {
            T* dst = gi.data() + c * D * H * W + ((d / factor) * H + h / factor) * W;
            const T* src = go.data() + c * OD * OH * OW + (d * OH + h) * OW;
            for (std::size_t w = 0; w < OW; ++w) dst[w / factor] += src[w];
          }
    });
  }
  return out;
}

template <class T>
bool all_finite(std::span<const T> v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace surf2ct
