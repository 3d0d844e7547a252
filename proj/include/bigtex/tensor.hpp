#pragma once

// Dense rank-1..3 tensors with reverse-mode automatic differentiation.
//
// Operations executed while a TapeT<T>::Scope is active are recorded onto
// that tape; TapeT::backward replays the record in reverse and accumulates
// gradients into every tensor that requires them. With no active tape the
// same operations run as pure functions, which is how evaluation passes
// avoid autodiff overhead entirely.
//
// Tensors are cheap shared handles. Values are immutable after creation
// except for gradient accumulation during a backward pass and in-place
// parameter updates between tapes (optimizer steps, finite differencing).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bigtex/errors.hpp"

namespace bigtex {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
class TapeT;

namespace detail {

template <typename T>
struct NodeT {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  int tape_id = -1;  // index of the producing tape record; -1 for leaves
  TapeT<T>* tape = nullptr;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor handle

template <typename T>
class TensorT {
 public:
  using Node = detail::NodeT<T>;
  using NodePtr = std::shared_ptr<Node>;

  TensorT() = default;

  static TensorT zeros(Shape shape) {
    return from_values(std::move(shape), {}, T(0));
  }
  static TensorT full(Shape shape, T value) {
    return from_values(std::move(shape), {}, value);
  }
  static TensorT ones(Shape shape) { return full(std::move(shape), T(1)); }

  static TensorT from_values(Shape shape, std::vector<T> values, T fill = T(0)) {
    check_rank(shape);
    auto n = std::make_shared<Node>();
    const std::size_t count = numel(shape);
    if (values.empty()) values.assign(count, fill);
    if (values.size() != count) {
      throw DimensionError("tensor values length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    n->shape = std::move(shape);
    n->values = std::move(values);
    return TensorT(std::move(n));
  }

  static TensorT scalar(T v) { return from_values({1}, {v}); }

  static TensorT randn(Shape shape, T stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    auto t = zeros(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng)) * stddev;
    return t;
  }

  static TensorT rand_uniform(Shape shape, T lo, T hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                                static_cast<double>(hi));
    auto t = zeros(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t size() const { return n_->values.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape[i]; }

  std::vector<T>& values() { return n_->values; }
  const std::vector<T>& values() const { return n_->values; }
  T* data() { return n_->values.data(); }
  const T* data() const { return n_->values.data(); }

  T item() const {
    if (size() != 1) {
      throw ContractError("item() requires a scalar tensor, got shape " +
                          shape_str(shape()));
    }
    return n_->values[0];
  }

  T at(std::size_t i) const { return n_->values[i]; }
  T at(std::size_t i, std::size_t j) const {
    return n_->values[i * n_->shape[1] + j];
  }
  T at(std::size_t b, std::size_t i, std::size_t j) const {
    return n_->values[(b * n_->shape[1] + i) * n_->shape[2] + j];
  }
  T& at(std::size_t i) { return n_->values[i]; }
  T& at(std::size_t i, std::size_t j) { return n_->values[i * n_->shape[1] + j]; }
  T& at(std::size_t b, std::size_t i, std::size_t j) {
    return n_->values[(b * n_->shape[1] + i) * n_->shape[2] + j];
  }

  bool requires_grad() const { return n_->requires_grad; }
  TensorT& set_requires_grad(bool rg) {
    n_->requires_grad = rg;
    return *this;
  }

  bool is_leaf() const { return n_->tape_id < 0; }
  int tape_id() const { return n_->tape_id; }

  bool has_grad() const { return n_->grad.size() == n_->values.size(); }
  const std::vector<T>& grad() const {
    if (!has_grad()) {
      throw ContractError("tensor has no gradient (run backward first)");
    }
    return n_->grad;
  }
  void zero_grad() {
    if (has_grad()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  /// Value copy with no tape connection and no gradient requirement.
  TensorT detach() const {
    auto n = std::make_shared<Node>();
    n->shape = n_->shape;
    n->values = n_->values;
    return TensorT(std::move(n));
  }

  TensorT clone(bool requires_grad_flag = false) const {
    auto t = detach();
    t.set_requires_grad(requires_grad_flag);
    return t;
  }

  const NodePtr& node() const { return n_; }

 private:
  explicit TensorT(NodePtr n) : n_(std::move(n)) {}

  static void check_rank(const Shape& shape) {
    if (shape.empty() || shape.size() > 3) {
      throw DimensionError("tensor rank must be 1..3, got shape " + shape_str(shape));
    }
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("zero dimension in shape " + shape_str(shape));
    }
  }

  NodePtr n_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// ---------------------------------------------------------------------------
// Tape

template <typename T>
class TapeT {
 public:
  using NodePtr = typename TensorT<T>::NodePtr;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  ~TapeT() {
    for (auto& r : records_) {
      r.output->tape = nullptr;
      r.output->tape_id = -1;
    }
  }

  /// Makes this tape the recording target for the current thread.
  class Scope {
   public:
    explicit Scope(TapeT& t) : prev_(current_) { current_ = &t; }
    ~Scope() { current_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    TapeT* prev_;
  };

  static TapeT* current() { return current_; }

  std::size_t size() const { return records_.size(); }

  void record(const char* name, std::vector<NodePtr> inputs, const NodePtr& output,
              std::function<void()> back) {
    output->tape = this;
    output->tape_id = static_cast<int>(records_.size());
    records_.push_back(Record{std::move(inputs), output, std::move(back), name});
  }

  /// Accumulates gradients for everything reachable from `loss`.
  void backward(const TensorT<T>& loss) {
    const auto& node = loss.node();
    if (loss.size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(loss.shape()));
    }
    if (node->tape != this || node->tape_id < 0) {
      throw ContractError("backward: loss is not connected to this tape");
    }
    std::vector<char> reachable(records_.size(), 0);
    std::vector<int> stack{node->tape_id};
    while (!stack.empty()) {
      int rid = stack.back();
      stack.pop_back();
      if (reachable[rid]) continue;
      reachable[rid] = 1;
      for (const auto& in : records_[rid].inputs) {
        if (in->tape == this && in->tape_id >= 0 && !reachable[in->tape_id]) {
          stack.push_back(in->tape_id);
        }
      }
    }
    node->ensure_grad();
    node->grad[0] = T(1);
    for (int rid = static_cast<int>(records_.size()) - 1; rid >= 0; --rid) {
      if (reachable[rid]) records_[rid].back();
    }
  }

 private:
  struct Record {
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> back;
    const char* name;
  };

  std::vector<Record> records_;
  inline static thread_local TapeT* current_ = nullptr;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

/// backward entry point matching the tensor-level contract: the loss must be
/// a scalar produced under a still-live tape.
template <typename T>
void backward(const TensorT<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  TapeT<T>* tape = loss.node()->tape;
  if (tape == nullptr) {
    throw ContractError("backward: loss is not connected to a tape");
  }
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Kernels (row-major, contiguous)

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
inline void mm_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict crow = c + i * n;
    const T* __restrict arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x t] * B[n x t]^T   (dot products of contiguous rows)
template <typename T>
inline void mm_acc_bt(const T* __restrict a, const T* __restrict b, T* __restrict c,
                      std::size_t m, std::size_t t, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* __restrict arow = a + i * t;
    T* __restrict crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* __restrict brow = b + j * t;
      T acc = T(0);
      for (std::size_t p = 0; p < t; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * D[m x n]
template <typename T>
inline void mm_acc_at(const T* __restrict a, const T* __restrict d, T* __restrict c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < m; ++p) {
    const T* __restrict arow = a + p * k;
    const T* __restrict drow = d + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const T av = arow[i];
      T* __restrict crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * drow[j];
    }
  }
}

template <typename T>
inline bool recording(std::initializer_list<const TensorT<T>*> ins) {
  if (TapeT<T>::current() == nullptr) return false;
  for (const TensorT<T>* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
inline void mark_output(TensorT<T>& out) {
  out.set_requires_grad(true);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  auto out = TensorT<T>::zeros(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
  if (detail::recording<T>({&a, &b})) {
    detail::mark_output(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    TapeT<T>::current()->record("add", {an, bn}, on, [an, bn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  auto out = TensorT<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.values()[i] = a.values()[i] - b.values()[i];
  if (detail::recording<T>({&a, &b})) {
    detail::mark_output(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    TapeT<T>::current()->record("sub", {an, bn}, on, [an, bn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  auto out = TensorT<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.values()[i] = a.values()[i] * b.values()[i];
  if (detail::recording<T>({&a, &b})) {
    detail::mark_output(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    TapeT<T>::current()->record("mul", {an, bn}, on, [an, bn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * bn->values[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i] * an->values[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  auto out = TensorT<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * c;
  if (detail::recording<T>({&a})) {
    detail::mark_output(out);
    auto an = a.node(), on = out.node();
    TapeT<T>::current()->record("scale", {an}, on, [an, on, c] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
      }
    });
  }
  return out;
}

/// Broadcasts a length-n vector over the last dimension.
template <typename T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& b) {
  const std::size_t n = x.shape().back();
  if (b.rank() != 1 || b.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) +
                         " does not match last dim of " + shape_str(x.shape()));
  }
  auto out = TensorT<T>::zeros(x.shape());
  const std::size_t rows = x.size() / n;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j)
      out.values()[r * n + j] = x.values()[r * n + j] + b.values()[j];
  if (detail::recording<T>({&x, &b})) {
    detail::mark_output(out);
    auto xn = x.node(), bn = b.node(), on = out.node();
    TapeT<T>::current()->record("add_bias", {xn, bn}, on, [xn, bn, on, rows, n] {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) bn->grad[j] += on->grad[r * n + j];
      }
    });
  }
  return out;
}

/// x[B x m x n] + y[B x 1 x n], broadcast over the middle dimension.
template <typename T>
TensorT<T> add_bcast1(const TensorT<T>& x, const TensorT<T>& y) {
  if (x.rank() != 3 || y.rank() != 3 || y.dim(1) != 1 || x.dim(0) != y.dim(0) ||
      x.dim(2) != y.dim(2)) {
    throw DimensionError("add_bcast1: incompatible shapes " + shape_str(x.shape()) +
                         " vs " + shape_str(y.shape()));
  }
  const std::size_t batch = x.dim(0), m = x.dim(1), n = x.dim(2);
  auto out = TensorT<T>::zeros(x.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const T* yrow = y.data() + b * n;
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t off = (b * m + i) * n;
      for (std::size_t j = 0; j < n; ++j)
        out.values()[off + j] = x.values()[off + j] + yrow[j];
    }
  }
  if (detail::recording<T>({&x, &y})) {
    detail::mark_output(out);
    auto xn = x.node(), yn = y.node(), on = out.node();
    TapeT<T>::current()->record("add_bcast1", {xn, yn}, on, [xn, yn, on, batch, m, n] {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (yn->requires_grad) {
        yn->ensure_grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              yn->grad[b * n + j] += on->grad[(b * m + i) * n + j];
      }
    });
  }
  return out;
}

/// x[B x m x n] + y[m x n], broadcast over the batch dimension.
template <typename T>
TensorT<T> add_bcast_batch(const TensorT<T>& x, const TensorT<T>& y) {
  if (x.rank() != 3 || y.rank() != 2 || x.dim(1) != y.dim(0) || x.dim(2) != y.dim(1)) {
    throw DimensionError("add_bcast_batch: incompatible shapes " +
                         shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  const std::size_t batch = x.dim(0), plane = y.size();
  auto out = TensorT<T>::zeros(x.shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < plane; ++i)
      out.values()[b * plane + i] = x.values()[b * plane + i] + y.values()[i];
  if (detail::recording<T>({&x, &y})) {
    detail::mark_output(out);
    auto xn = x.node(), yn = y.node(), on = out.node();
    TapeT<T>::current()->record("add_bcast_batch", {xn, yn}, on, [xn, yn, on, batch, plane] {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (yn->requires_grad) {
        yn->ensure_grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < plane; ++i)
            yn->grad[i] += on->grad[b * plane + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products

/// Matrix product. Supported shapes:
///   [m x k] * [k x n]          -> [m x n]
///   [B x m x k] * [k x n]      -> [B x m x n]   (shared right operand)
///   [B x m x k] * [B x k x n]  -> [B x m x n]
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  const auto bad = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
  };
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  enum class Mode { MM, BM, BB } mode;
  if (a.rank() == 2 && b.rank() == 2) {
    mode = Mode::MM;
    m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw bad();
  } else if (a.rank() == 3 && b.rank() == 2) {
    mode = Mode::BM;
    batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    if (b.dim(0) != k) throw bad();
  } else if (a.rank() == 3 && b.rank() == 3) {
    mode = Mode::BB;
    batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) throw bad();
  } else {
    throw bad();
  }

  Shape out_shape = (mode == Mode::MM) ? Shape{m, n} : Shape{batch, m, n};
  auto out = TensorT<T>::zeros(std::move(out_shape));
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* ap = a.data() + bi * m * k;
    const T* bp = b.data() + (mode == Mode::BB ? bi * k * n : 0);
    detail::mm_acc(ap, bp, out.data() + bi * m * n, m, k, n);
  }

  if (detail::recording<T>({&a, &b})) {
    detail::mark_output(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    const bool shared_rhs = (mode != Mode::BB);
    TapeT<T>::current()->record(
        "matmul", {an, bn}, on, [an, bn, on, batch, m, k, n, shared_rhs] {
          for (std::size_t bi = 0; bi < batch; ++bi) {
            const T* dc = on->grad.data() + bi * m * n;
            const T* ap = an->values.data() + bi * m * k;
            const T* bp = bn->values.data() + (shared_rhs ? 0 : bi * k * n);
            if (an->requires_grad) {
              an->ensure_grad();
              // dA = dC * B^T
              detail::mm_acc_bt(dc, bp, an->grad.data() + bi * m * k, m, n, k);
            }
            if (bn->requires_grad) {
              bn->ensure_grad();
              // dB = A^T * dC
              detail::mm_acc_at(ap, dc, bn->grad.data() + (shared_rhs ? 0 : bi * k * n),
                                m, k, n);
            }
          }
        });
  }
  return out;
}

/// Swaps the last two dimensions.
template <typename T>
TensorT<T> transpose_last(const TensorT<T>& x) {
  if (x.rank() < 2) {
    throw DimensionError("transpose_last needs rank >= 2, got " + shape_str(x.shape()));
  }
  const std::size_t batch = (x.rank() == 3) ? x.dim(0) : 1;
  const std::size_t m = x.dim(x.rank() - 2), n = x.dim(x.rank() - 1);
  Shape out_shape = x.shape();
  std::swap(out_shape[x.rank() - 2], out_shape[x.rank() - 1]);
  auto out = TensorT<T>::zeros(std::move(out_shape));
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = x.data() + b * m * n;
    T* dst = out.data() + b * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  if (detail::recording<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node(), on = out.node();
    TapeT<T>::current()->record("transpose_last", {xn}, on, [xn, on, batch, m, n] {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        const T* g = on->grad.data() + b * m * n;
        T* dst = xn->grad.data() + b * m * n;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += g[j * m + i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  auto out = TensorT<T>::from_values(std::move(shape), x.values());
  if (detail::recording<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node(), on = out.node();
    TapeT<T>::current()->record("reshape", {xn}, on, [xn, on] {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slicing and concatenation

/// out[..., j] = x[..., start + j] for j in [0, len).
template <typename T>
TensorT<T> slice_lastdim(const TensorT<T>& x, std::size_t start, std::size_t len) {
  const std::size_t n = x.shape().back();
  if (start + len > n || len == 0) {
    throw DimensionError("slice_lastdim: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + std::to_string(n));
  }
  Shape out_shape = x.shape();
  out_shape.back() = len;
  auto out = TensorT<T>::zeros(std::move(out_shape));
  const std::size_t rows = x.size() / n;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j)
      out.values()[r * len + j] = x.values()[r * n + start + j];
  if (detail::recording<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node(), on = out.node();
    TapeT<T>::current()->record("slice_lastdim", {xn}, on, [xn, on, rows, n, start, len] {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j)
          xn->grad[r * n + start + j] += on->grad[r * len + j];
    });
  }
  return out;
}

/// Slice of a rank-3 tensor along dim 1: out[b, i, :] = x[b, start + i, :].
template <typename T>
TensorT<T> slice_dim1(const TensorT<T>& x, std::size_t start, std::size_t len) {
  if (x.rank() != 3) {
    throw DimensionError("slice_dim1 needs rank 3, got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), m = x.dim(1), n = x.dim(2);
  if (start + len > m || len == 0) {
    throw DimensionError("slice_dim1: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + std::to_string(m));
  }
  auto out = TensorT<T>::zeros({batch, len, n});
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(x.data() + (b * m + start) * n, len * n, out.data() + b * len * n);
  if (detail::recording<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node(), on = out.node();
    TapeT<T>::current()->record("slice_dim1", {xn}, on, [xn, on, batch, m, n, start, len] {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        const T* g = on->grad.data() + b * len * n;
        T* dst = xn->grad.data() + (b * m + start) * n;
        for (std::size_t i = 0; i < len * n; ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

/// Concatenation along the last dimension; all other dims must agree.
template <typename T>
TensorT<T> concat_lastdim(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_lastdim: no inputs");
  Shape base = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != base.size()) {
      throw DimensionError("concat_lastdim: rank mismatch");
    }
    for (std::size_t d = 0; d + 1 < base.size(); ++d) {
      if (p.dim(d) != base[d]) {
        throw DimensionError("concat_lastdim: shape mismatch " + shape_str(p.shape()));
      }
    }
    total += p.shape().back();
  }
  Shape out_shape = base;
  out_shape.back() = total;
  auto out = TensorT<T>::zeros(out_shape);
  const std::size_t rows = out.size() / total;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape().back();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data() + r * w, w, out.data() + r * total + offset);
    offset += w;
  }
  bool track = false;
  for (const auto& p : parts) track = track || p.requires_grad();
  if (TapeT<T>::current() != nullptr && track) {
    detail::mark_output(out);
    std::vector<typename TensorT<T>::NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto on = out.node();
    TapeT<T>::current()->record("concat_lastdim", ins, on, [ins, on, rows, total] {
      std::size_t off = 0;
      for (const auto& in : ins) {
        const std::size_t w = in->values.size() / rows;
        if (in->requires_grad) {
          in->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j)
              in->grad[r * w + j] += on->grad[r * total + off + j];
        }
        off += w;
      }
    });
  }
  return out;
}

/// Concatenation of rank-3 tensors along dim 1 (the sequence dimension).
template <typename T>
TensorT<T> concat_dim1(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_dim1: no inputs");
  const std::size_t batch = parts[0].dim(0), n = parts[0].dim(2);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.dim(0) != batch || p.dim(2) != n) {
      throw DimensionError("concat_dim1: shape mismatch " + shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  auto out = TensorT<T>::zeros({batch, total, n});
  std::size_t row0 = 0;
  for (const auto& p : parts) {
    const std::size_t m = p.dim(1);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(p.data() + b * m * n, m * n, out.data() + (b * total + row0) * n);
    row0 += m;
  }
  bool track = false;
  for (const auto& p : parts) track = track || p.requires_grad();
  if (TapeT<T>::current() != nullptr && track) {
    detail::mark_output(out);
    std::vector<typename TensorT<T>::NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto on = out.node();
    TapeT<T>::current()->record("concat_dim1", ins, on, [ins, on, batch, total, n] {
      std::size_t r0 = 0;
      for (const auto& in : ins) {
        const std::size_t m = in->values.size() / (batch * n);
        if (in->requires_grad) {
          in->ensure_grad();
          for (std::size_t b = 0; b < batch; ++b) {
            const T* g = on->grad.data() + (b * total + r0) * n;
            T* dst = in->grad.data() + b * m * n;
            for (std::size_t i = 0; i < m * n; ++i) dst[i] += g[i];
          }
        }
        r0 += m;
      }
    });
  }
  return out;
}

/// Row gather from a rank-2 tensor; gradients scatter back into the
/// touched rows only.
template <typename T>
TensorT<T> take_rows(const TensorT<T>& x, const std::vector<std::size_t>& ids) {
  if (x.rank() != 2) {
    throw DimensionError("take_rows needs rank 2, got " + shape_str(x.shape()));
  }
  if (ids.empty()) throw ContractError("take_rows: empty id list");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  for (std::size_t id : ids) {
    if (id >= rows) {
      throw IndexError("take_rows: row id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(rows) + ")");
    }
  }
  auto out = TensorT<T>::zeros({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(x.data() + ids[r] * d, d, out.data() + r * d);
  if (detail::recording<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node(), on = out.node();
    TapeT<T>::current()->record("take_rows", {xn}, on, [xn, on, ids, d] {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < ids.size(); ++r) {
        T* dst = xn->grad.data() + ids[r] * d;
        const T* g = on->grad.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

/// Embedding lookup: row gather with vocabulary-style bounds reporting.
template <typename T>
TensorT<T> embedding_lookup(const TensorT<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) {
    throw DimensionError("embedding_lookup: table must be rank 2, got " +
                         shape_str(table.shape()));
  }
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.dim(0)) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) +
                       " outside table of size " + std::to_string(table.dim(0)));
    }
    rows.push_back(static_cast<std::size_t>(id));
  }
  return take_rows(table, rows);
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

enum class Activation { kRelu, kGelu, kLeakyRelu };

inline constexpr double kGeluCoef = 0.7978845608;  // sqrt(2/pi), tanh approximation
inline constexpr double kGeluCubic = 0.044715;

template <typename T>
TensorT<T> activation(const TensorT<T>& x, Activation kind, T leak = T(0.2)) {
  auto out = TensorT<T>::zeros(x.shape());
  const std::size_t n = x.size();
  switch (kind) {
    case Activation::kRelu:
      for (std::size_t i = 0; i < n; ++i)
        out.values()[i] = x.values()[i] > T(0) ? x.values()[i] : T(0);
      break;
    case Activation::kLeakyRelu:
      for (std::size_t i = 0; i < n; ++i)
        out.values()[i] = x.values()[i] > T(0) ? x.values()[i] : leak * x.values()[i];
      break;
    case Activation::kGelu:
      for (std::size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(x.values()[i]);
        const double u = kGeluCoef * (v + kGeluCubic * v * v * v);
        out.values()[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
      }
      break;
  }
  if (detail::recording<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node(), on = out.node();
    TapeT<T>::current()->record("activation", {xn}, on, [xn, on, kind, leak] {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const std::size_t n = on->grad.size();
      switch (kind) {
        case Activation::kRelu:
          for (std::size_t i = 0; i < n; ++i)
            if (xn->values[i] > T(0)) xn->grad[i] += on->grad[i];
          break;
        case Activation::kLeakyRelu:
          for (std::size_t i = 0; i < n; ++i)
            xn->grad[i] += on->grad[i] * (xn->values[i] > T(0) ? T(1) : leak);
          break;
        case Activation::kGelu:
          for (std::size_t i = 0; i < n; ++i) {
            const double v = static_cast<double>(xn->values[i]);
            const double u = kGeluCoef * (v + kGeluCubic * v * v * v);
            const double th = std::tanh(u);
            const double du = kGeluCoef * (1.0 + 3.0 * kGeluCubic * v * v);
            const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
            xn->grad[i] += on->grad[i] * static_cast<T>(d);
          }
          break;
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  return activation(x, Activation::kRelu);
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
  return activation(x, Activation::kGelu);
}

/// Softmax over the last dimension; every row of the output sums to 1.
/// Stabilized by row-max subtraction. Rejects NaN inputs.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  for (const T v : x.values()) {
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
  }
  auto out = TensorT<T>::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * n;
    T* dst = out.data() + r * n;
    T mx = src[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, src[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      dst[j] = std::exp(src[j] - mx);
      sum += dst[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) dst[j] *= inv;
  }
  if (detail::recording<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node(), on = out.node();
    TapeT<T>::current()->record("softmax_rows", {xn}, on, [xn, on, rows, n] {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* s = on->values.data() + r * n;
        const T* g = on->grad.data() + r * n;
        T* dx = xn->grad.data() + r * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * s[j];
        for (std::size_t j = 0; j < n; ++j) dx[j] += s[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

/// Per-row standardization over the last dimension followed by an affine map.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma,
                      const TensorT<T>& beta, T eps) {
  const std::size_t d = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
    throw DimensionError("layer_norm: affine params must have shape [" +
                         std::to_string(d) + "]");
  }
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  auto out = TensorT<T>::zeros(x.shape());
  std::vector<T> normed(x.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += src[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = src[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T istd = T(1) / std::sqrt(var + eps);
    inv_std[r] = istd;
    T* dst = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      const T y = (src[j] - mean) * istd;
      normed[r * d + j] = y;
      dst[j] = gamma.values()[j] * y + beta.values()[j];
    }
  }
  if (detail::recording<T>({&x, &gamma, &beta})) {
    detail::mark_output(out);
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    TapeT<T>::current()->record(
        "layer_norm", {xn, gn, bn}, on,
        [xn, gn, bn, on, rows, d, normed = std::move(normed),
         inv_std = std::move(inv_std)] {
          for (std::size_t r = 0; r < rows; ++r) {
            const T* g = on->grad.data() + r * d;
            const T* y = normed.data() + r * d;
            if (gn->requires_grad) {
              gn->ensure_grad();
              for (std::size_t j = 0; j < d; ++j) gn->grad[j] += g[j] * y[j];
            }
            if (bn->requires_grad) {
              bn->ensure_grad();
              for (std::size_t j = 0; j < d; ++j) bn->grad[j] += g[j];
            }
            if (xn->requires_grad) {
              xn->ensure_grad();
              T sum_gy = T(0), sum_gyy = T(0);
              for (std::size_t j = 0; j < d; ++j) {
                const T gy = g[j] * gn->values[j];
                sum_gy += gy;
                sum_gyy += gy * y[j];
              }
              const T inv_d = T(1) / static_cast<T>(d);
              T* dx = xn->grad.data() + r * d;
              for (std::size_t j = 0; j < d; ++j) {
                const T gy = g[j] * gn->values[j];
                dx[j] += inv_std[r] * (gy - inv_d * sum_gy - y[j] * inv_d * sum_gyy);
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  T acc = T(0);
  for (const T v : x.values()) acc += v;
  auto out = TensorT<T>::scalar(acc);
  if (detail::recording<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node(), on = out.node();
    TapeT<T>::current()->record("sum_all", {xn}, on, [xn, on] {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const T g = on->grad[0];
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

/// Mean over rows of -log softmax(logits)[label].
template <typename T>
TensorT<T> cross_entropy_loss(const TensorT<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy_loss: logits must be rank 2, got " +
                         shape_str(logits.shape()));
  }
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  if (labels.size() != m) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(m) + " rows");
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw IndexError("cross_entropy_loss: label " + std::to_string(label) +
                       " outside [0, " + std::to_string(c) + ")");
    }
  }
  std::vector<T> probs(m * c);
  T loss = T(0);
  for (std::size_t r = 0; r < m; ++r) {
    const T* src = logits.data() + r * c;
    T mx = src[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, src[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(src[j] - mx);
      sum += probs[r * c + j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] *= inv;
    loss -= std::log(probs[r * c + static_cast<std::size_t>(labels[r])]);
  }
  loss /= static_cast<T>(m);
  auto out = TensorT<T>::scalar(loss);
  if (detail::recording<T>({&logits})) {
    detail::mark_output(out);
    auto ln = logits.node(), on = out.node();
    TapeT<T>::current()->record(
        "cross_entropy_loss", {ln}, on,
        [ln, on, labels, m, c, probs = std::move(probs)] {
          if (!ln->requires_grad) return;
          ln->ensure_grad();
          const T g = on->grad[0] / static_cast<T>(m);
          for (std::size_t r = 0; r < m; ++r) {
            T* dst = ln->grad.data() + r * c;
            const T* p = probs.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += g * p[j];
            dst[static_cast<std::size_t>(labels[r])] -= g;
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout (composed from mul with a constant keep mask)

template <typename T>
TensorT<T> apply_dropout(const TensorT<T>& x, T p, std::mt19937_64& rng, bool training) {
  if (!training || p <= T(0)) return x;
  if (p >= T(1)) throw ContractError("dropout probability must be < 1");
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  auto mask = TensorT<T>::zeros(x.shape());
  const T keep_scale = T(1) / (T(1) - p);
  for (auto& v : mask.values())
    v = (dist(rng) < static_cast<double>(p)) ? T(0) : keep_scale;
  return mul(x, mask);
}

// ---------------------------------------------------------------------------
// Gradient verification

/// Central-difference check of d f / d point. `f` must return a scalar and
/// must not capture state that changes between calls. Returns the max over
/// coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <typename T>
T grad_check(const std::function<TensorT<T>(const TensorT<T>&)>& f,
             const TensorT<T>& point, T eps) {
  TensorT<T> x = point.clone(true);
  std::vector<T> analytic(x.size(), T(0));
  {
    TapeT<T> tape;
    typename TapeT<T>::Scope scope(tape);
    auto loss = f(x);
    if (loss.size() != 1) throw ContractError("grad_check: f must return a scalar");
    if (!loss.is_leaf()) {
      tape.backward(loss);
      if (x.has_grad()) analytic = x.grad();
    }
  }
  T max_err = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x.values()[i];
    x.values()[i] = saved + eps;
    const T fp = f(x).item();
    x.values()[i] = saved - eps;
    const T fm = f(x).item();
    x.values()[i] = saved;
    const T numeric = (fp - fm) / (T(2) * eps);
    const T denom = std::max(T(1e-8), std::abs(analytic[i]) + std::abs(numeric));
    max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
  }
  return max_err;
}

/// Multi-parameter variant: checks d f() / d p for every listed parameter,
/// perturbing parameter values in place between evaluations.
template <typename T>
T grad_check_params(const std::function<TensorT<T>()>& f,
                    const std::vector<TensorT<T>>& params, T eps) {
  std::vector<std::vector<T>> analytic;
  {
    TapeT<T> tape;
    typename TapeT<T>::Scope scope(tape);
    auto loss = f();
    if (loss.size() != 1) throw ContractError("grad_check_params: f must return a scalar");
    if (!loss.is_leaf()) tape.backward(loss);
    for (const auto& p : params)
      analytic.push_back(p.has_grad() ? p.grad() : std::vector<T>(p.size(), T(0)));
  }
  T max_err = T(0);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    TensorT<T> p = params[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T saved = p.values()[i];
      p.values()[i] = saved + eps;
      const T fp = f().item();
      p.values()[i] = saved - eps;
      const T fm = f().item();
      p.values()[i] = saved;
      const T numeric = (fp - fm) / (T(2) * eps);
      const T a = analytic[pi][i];
      const T denom = std::max(T(1e-8), std::abs(a) + std::abs(numeric));
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace bigtex
