#pragma once

// Adam with decoupled weight decay and optional global-norm gradient
// clipping. Parameters are referenced by stable path strings; tensors that
// do not require gradients are excluded from the optimizer state entirely.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bigtex/errors.hpp"
#include "bigtex/tensor.hpp"

namespace bigtex {

template <typename T>
struct ParamRef {
  std::string path;
  TensorT<T> tensor;
};

template <typename T>
class AdamT {
 public:
  AdamT(std::vector<ParamRef<T>> params, T lr, T weight_decay, T clip_norm = T(0))
      : lr_(lr), weight_decay_(weight_decay), clip_norm_(clip_norm) {
    for (auto& p : params) {
      if (!p.tensor.requires_grad()) continue;  // frozen weights carry no state
      state_.push_back(Slot{std::move(p.path), p.tensor,
                            std::vector<T>(p.tensor.size(), T(0)),
                            std::vector<T>(p.tensor.size(), T(0))});
    }
  }

  std::vector<std::string> paths() const {
    std::vector<std::string> out;
    out.reserve(state_.size());
    for (const auto& s : state_) out.push_back(s.path);
    return out;
  }

  std::size_t num_trainable_values() const {
    std::size_t n = 0;
    for (const auto& s : state_) n += s.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& s : state_) s.tensor.zero_grad();
  }

  /// One update over all tracked parameters. Parameters that received no
  /// gradient this step are treated as having a zero gradient.
  void step() {
    ++t_;
    for (auto& s : state_) {
      if (!s.tensor.has_grad()) continue;
      for (const T g : s.tensor.grad()) {
        if (std::isnan(g) || std::isinf(g)) {
          throw NumericError("adam_step: non-finite gradient in " + s.path);
        }
      }
    }
    if (clip_norm_ > T(0)) {
      double sq = 0;
      for (const auto& s : state_) {
        if (!s.tensor.has_grad()) continue;
        for (const T g : s.tensor.grad()) sq += static_cast<double>(g) * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > static_cast<double>(clip_norm_)) {
        const T factor = static_cast<T>(static_cast<double>(clip_norm_) / norm);
        for (auto& s : state_) {
          if (!s.tensor.has_grad()) continue;
          auto& node = *s.tensor.node();
          for (auto& g : node.grad) g *= factor;
        }
      }
    }
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (auto& s : state_) {
      auto& values = s.tensor.values();
      const bool has_grad = s.tensor.has_grad();
      if (weight_decay_ > T(0)) {
        const T decay = T(1) - lr_ * weight_decay_;
        for (auto& v : values) v *= decay;
      }
      for (std::size_t i = 0; i < values.size(); ++i) {
        const T g = has_grad ? s.tensor.grad()[i] : T(0);
        s.m[i] = beta1_ * s.m[i] + (T(1) - beta1_) * g;
        s.v[i] = beta2_ * s.v[i] + (T(1) - beta2_) * g * g;
        const T mhat = s.m[i] / bc1;
        const T vhat = s.v[i] / bc2;
        values[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::int64_t steps_taken() const { return t_; }
  T learning_rate() const { return lr_; }
  void set_learning_rate(T lr) { lr_ = lr; }

 private:
  struct Slot {
    std::string path;
    TensorT<T> tensor;
    std::vector<T> m, v;
  };

  std::vector<Slot> state_;
  T lr_;
  T weight_decay_;
  T clip_norm_;
  T beta1_ = T(0.9);
  T beta2_ = T(0.999);
  T eps_ = T(1e-8);
  std::int64_t t_ = 0;
};

using Adam = AdamT<float>;

}  // namespace bigtex
