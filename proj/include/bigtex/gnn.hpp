#pragma once

// Message-passing layers over sampled subgraphs, three variants:
//   gcn:  symmetric-normalized mean with self-loop, then W, then ReLU
//   sage: self and mean-of-neighbors paths through separate weights
//   gat:  per-head attention over the neighborhood including self
// All variants are pure functions of (params, features, adjacency).

#include <random>
#include <string>
#include <vector>

#include "bigtex/errors.hpp"
#include "bigtex/graph.hpp"
#include "bigtex/optim.hpp"
#include "bigtex/tensor.hpp"

namespace bigtex {

enum class GnnVariant { kGcn, kSage, kGat };

inline GnnVariant gnn_variant_from_name(const std::string& name) {
  if (name == "gcn") return GnnVariant::kGcn;
  if (name == "sage") return GnnVariant::kSage;
  if (name == "gat") return GnnVariant::kGat;
  throw ConfigError("unknown gnn variant '" + name + "' (expected gcn|sage|gat)");
}

inline const char* gnn_variant_name(GnnVariant v) {
  switch (v) {
    case GnnVariant::kGcn: return "gcn";
    case GnnVariant::kSage: return "sage";
    case GnnVariant::kGat: return "gat";
  }
  return "sage";
}

/// Borrowed view of a CSR adjacency; valid as long as the owner lives.
struct CsrRef {
  const std::size_t* offsets = nullptr;
  const std::size_t* targets = nullptr;
  std::size_t num_nodes = 0;

  static CsrRef of(const SampledSubgraph& s) {
    return {s.csr_offsets.data(), s.csr_targets.data(), s.num_nodes()};
  }
  static CsrRef of(const TextAttributedGraph& g) {
    return {g.csr_offsets.data(), g.csr_targets.data(), g.num_nodes};
  }
  std::size_t degree(std::size_t n) const { return offsets[n + 1] - offsets[n]; }
};

template <typename T>
struct GnnLayerParamsT {
  GnnVariant variant = GnnVariant::kSage;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  TensorT<T> w;                        // gcn and gat
  TensorT<T> w_self, w_neigh;          // sage
  std::vector<TensorT<T>> attn_src;    // gat, one [head_dim x 1] vector per head
  std::vector<TensorT<T>> attn_dst;
  std::size_t n_heads = 1;
  T leaky_slope = T(0.2);

  static GnnLayerParamsT init(GnnVariant variant, std::size_t in_dim,
                              std::size_t out_dim, std::size_t n_heads,
                              std::mt19937_64& rng);
  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) const;
};

using GnnLayerParams = GnnLayerParamsT<float>;

/// One message-passing layer: h [N x in_dim] -> [N x out_dim]. When
/// attention_out is non-null and the variant is gat, the per-head attention
/// matrices (rows summing to 1 over each neighborhood) are appended to it.
template <typename T>
TensorT<T> gnn_layer(const TensorT<T>& h, const CsrRef& csr,
                     const GnnLayerParamsT<T>& params,
                     std::vector<TensorT<T>>* attention_out = nullptr);

// ---------------------------------------------------------------------------
// Template definitions

template <typename T>
GnnLayerParamsT<T> GnnLayerParamsT<T>::init(GnnVariant variant, std::size_t in_dim,
                                            std::size_t out_dim, std::size_t n_heads,
                                            std::mt19937_64& rng) {
  if (in_dim == 0 || out_dim == 0) {
    throw ConfigError("gnn layer: dimensions must be positive");
  }
  GnnLayerParamsT p;
  p.variant = variant;
  p.in_dim = in_dim;
  p.out_dim = out_dim;
  p.n_heads = variant == GnnVariant::kGat ? n_heads : 1;
  const T s = std::sqrt(T(2) / static_cast<T>(in_dim + out_dim));
  switch (variant) {
    case GnnVariant::kGcn:
      p.w = TensorT<T>::randn({in_dim, out_dim}, s, rng).set_requires_grad(true);
      break;
    case GnnVariant::kSage:
      p.w_self = TensorT<T>::randn({in_dim, out_dim}, s, rng).set_requires_grad(true);
      p.w_neigh = TensorT<T>::randn({in_dim, out_dim}, s, rng).set_requires_grad(true);
      break;
    case GnnVariant::kGat: {
      if (n_heads == 0 || out_dim % n_heads != 0) {
        throw ConfigError("gat: out_dim " + std::to_string(out_dim) +
                          " not divisible by " + std::to_string(n_heads) + " heads");
      }
      p.w = TensorT<T>::randn({in_dim, out_dim}, s, rng).set_requires_grad(true);
      const std::size_t head_dim = out_dim / n_heads;
      for (std::size_t k = 0; k < n_heads; ++k) {
        p.attn_src.push_back(
            TensorT<T>::randn({head_dim, 1}, s, rng).set_requires_grad(true));
        p.attn_dst.push_back(
            TensorT<T>::randn({head_dim, 1}, s, rng).set_requires_grad(true));
      }
      break;
    }
  }
  return p;
}

template <typename T>
void GnnLayerParamsT<T>::collect_params(const std::string& prefix,
                                        std::vector<ParamRef<T>>& out) const {
  switch (variant) {
    case GnnVariant::kGcn:
      out.push_back({prefix + "w", w});
      break;
    case GnnVariant::kSage:
      out.push_back({prefix + "w_self", w_self});
      out.push_back({prefix + "w_neigh", w_neigh});
      break;
    case GnnVariant::kGat:
      out.push_back({prefix + "w", w});
      for (std::size_t k = 0; k < attn_src.size(); ++k) {
        out.push_back({prefix + "attn_src" + std::to_string(k), attn_src[k]});
        out.push_back({prefix + "attn_dst" + std::to_string(k), attn_dst[k]});
      }
      break;
  }
}

namespace detail {

/// Symmetric-normalized adjacency with self loops:
/// entry (i, j) = 1 / sqrt((deg_i + 1)(deg_j + 1)) for j in N(i) or j == i.
template <typename T>
TensorT<T> gcn_matrix(const CsrRef& csr) {
  const std::size_t n = csr.num_nodes;
  auto m = TensorT<T>::zeros({n, n});
  std::vector<T> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    inv_sqrt[i] = T(1) / std::sqrt(static_cast<T>(csr.degree(i) + 1));
  }
  for (std::size_t i = 0; i < n; ++i) {
    T* row = m.data() + i * n;
    row[i] = inv_sqrt[i] * inv_sqrt[i];
    for (std::size_t e = csr.offsets[i]; e < csr.offsets[i + 1]; ++e) {
      const std::size_t j = csr.targets[e];
      row[j] = inv_sqrt[i] * inv_sqrt[j];
    }
  }
  return m;
}

/// Row-normalized adjacency without self loops; isolated rows stay zero.
template <typename T>
TensorT<T> mean_matrix(const CsrRef& csr) {
  const std::size_t n = csr.num_nodes;
  auto m = TensorT<T>::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t deg = csr.degree(i);
    if (deg == 0) continue;
    const T w = T(1) / static_cast<T>(deg);
    T* row = m.data() + i * n;
    for (std::size_t e = csr.offsets[i]; e < csr.offsets[i + 1]; ++e) {
      row[csr.targets[e]] = w;
    }
  }
  return m;
}

/// Additive mask: 0 on N(i) and the diagonal, -1e9 elsewhere.
template <typename T>
TensorT<T> neighborhood_mask(const CsrRef& csr) {
  const std::size_t n = csr.num_nodes;
  auto m = TensorT<T>::full({n, n}, T(-1e9));
  for (std::size_t i = 0; i < n; ++i) {
    T* row = m.data() + i * n;
    row[i] = T(0);
    for (std::size_t e = csr.offsets[i]; e < csr.offsets[i + 1]; ++e) {
      row[csr.targets[e]] = T(0);
    }
  }
  return m;
}

}  // namespace detail

template <typename T>
TensorT<T> gnn_layer(const TensorT<T>& h, const CsrRef& csr,
                     const GnnLayerParamsT<T>& params,
                     std::vector<TensorT<T>>* attention_out) {
  if (h.rank() != 2 || h.dim(0) != csr.num_nodes || h.dim(1) != params.in_dim) {
    throw ContractError("gnn_layer: features " + shape_str(h.shape()) +
                        " do not match " + std::to_string(csr.num_nodes) +
                        " nodes x " + std::to_string(params.in_dim) + " dims");
  }
  switch (params.variant) {
    case GnnVariant::kGcn: {
      auto agg = matmul(detail::gcn_matrix<T>(csr), h);
      return relu(matmul(agg, params.w));
    }
    case GnnVariant::kSage: {
      auto neigh_mean = matmul(detail::mean_matrix<T>(csr), h);
      return relu(add(matmul(h, params.w_self), matmul(neigh_mean, params.w_neigh)));
    }
    case GnnVariant::kGat: {
      const std::size_t n = csr.num_nodes;
      const std::size_t head_dim = params.out_dim / params.n_heads;
      auto hw = matmul(h, params.w);
      auto mask = detail::neighborhood_mask<T>(csr);
      auto ones_row = TensorT<T>::ones({1, n});
      auto ones_col = TensorT<T>::ones({n, 1});
      std::vector<TensorT<T>> heads;
      heads.reserve(params.n_heads);
      for (std::size_t k = 0; k < params.n_heads; ++k) {
        auto hk = slice_lastdim(hw, k * head_dim, head_dim);
        auto src = matmul(hk, params.attn_src[k]);  // [N x 1]
        auto dst = matmul(hk, params.attn_dst[k]);
        // e_ij = leakyrelu(src_i + dst_j) over the allowed neighborhood
        auto e = activation(add(matmul(src, ones_row),
                                matmul(ones_col, transpose_last(dst))),
                            Activation::kLeakyRelu, params.leaky_slope);
        auto alpha = softmax_rows(add(e, mask));
        if (attention_out != nullptr) attention_out->push_back(alpha);
        heads.push_back(matmul(alpha, hk));
      }
      auto ctx = params.n_heads == 1 ? heads[0] : concat_lastdim(heads);
      return relu(ctx);
    }
  }
  throw ContractError("gnn_layer: unknown variant");
}

}  // namespace bigtex
