#pragma once

// Low-rank adapters over frozen linear weights. The adapted weight is
// base + (alpha/r) * B * A with A [r x k], B [d x r]; only A and B train,
// the base tensor never receives a gradient.

#include <random>
#include <string>
#include <utility>

#include "bigtex/errors.hpp"
#include "bigtex/tensor.hpp"

namespace bigtex {

template <typename T>
struct LoRAAdapterT {
  TensorT<T> a;  // [r x k], Gaussian init
  TensorT<T> b;  // [d x r], zero init so the initial delta vanishes
  std::size_t rank = 0;
  T alpha = T(0);
  std::string target;  // path of the frozen base weight this adapts

  std::size_t trainable_params() const { return a.size() + b.size(); }
};

using LoRAAdapter = LoRAAdapterT<float>;

template <typename T>
LoRAAdapterT<T> init_adapter(std::size_t d, std::size_t k, std::size_t r, T alpha,
                             std::mt19937_64& rng, std::string target = {}) {
  if (r < 1 || 2 * r > std::min(d, k)) {
    throw ContractError("lora rank " + std::to_string(r) +
                        " too large for weight " + std::to_string(d) + "x" +
                        std::to_string(k) + " (need r <= min(d,k)/2)");
  }
  LoRAAdapterT<T> adapter;
  adapter.a = TensorT<T>::randn({r, k}, T(0.02), rng);
  adapter.a.set_requires_grad(true);
  adapter.b = TensorT<T>::zeros({d, r});
  adapter.b.set_requires_grad(true);
  adapter.rank = r;
  adapter.alpha = alpha;
  adapter.target = std::move(target);
  return adapter;
}

/// base + (alpha/r) * B * A. The base stays frozen: it is a leaf that does
/// not require gradients, so backward never touches it.
template <typename T>
TensorT<T> effective_weight(const TensorT<T>& base, const LoRAAdapterT<T>& adapter) {
  if (base.rank() != 2 || base.dim(0) != adapter.b.dim(0) ||
      base.dim(1) != adapter.a.dim(1)) {
    throw DimensionError("lora: base " + shape_str(base.shape()) +
                         " incompatible with adapter delta " +
                         std::to_string(adapter.b.dim(0)) + "x" +
                         std::to_string(adapter.a.dim(1)));
  }
  auto delta = matmul(adapter.b, adapter.a);
  return add(base, scale(delta, adapter.alpha / static_cast<T>(adapter.rank)));
}

}  // namespace bigtex
