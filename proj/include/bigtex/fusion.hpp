#pragma once

// Graph-text fusion units and their stacking. One unit runs, per node:
//   1. prompt assembly: the previous unit's output is projected into
//      encoder space and prepended to the node's token embeddings as a
//      soft structural token, separated from the text by [SEP]
//   2. the encoder self-attends over the prompt
//   3. cross-attention: query from the structural state, keys and values
//      from the encoder's token outputs, padding masked
//   4. a GNN layer aggregates the cross-attended features over the batch
//      subgraph; its output feeds the next unit
//
// The first unit consumes a trainable linear projection of the raw node
// features. Encoders (and their LoRA adapters) are shared across units by
// default; a config switch instantiates one per unit.

#include <random>
#include <string>
#include <vector>

#include "bigtex/errors.hpp"
#include "bigtex/gnn.hpp"
#include "bigtex/graph.hpp"
#include "bigtex/lora.hpp"
#include "bigtex/optim.hpp"
#include "bigtex/tensor.hpp"
#include "bigtex/text.hpp"

namespace bigtex {

struct FusionStackConfig {
  std::size_t n_units = 2;
  std::size_t feature_dim = 0;  // d_x of the incoming node features
  std::size_t hidden_dim = 64;  // unit output width, constant along the stack
  std::size_t d_attn = 0;       // 0: use the encoder d_model
  GnnVariant gnn_variant = GnnVariant::kSage;
  std::size_t gat_heads = 1;
  Pooling pooling = Pooling::kCls;
  bool share_encoder = true;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;

  void validate(const EncoderConfig& enc) const {
    if (n_units == 0 || feature_dim == 0 || hidden_dim == 0) {
      throw ConfigError("fusion config: n_units, feature_dim, hidden_dim "
                        "must be positive");
    }
    const std::size_t da = d_attn == 0 ? enc.d_model : d_attn;
    if (da == 0) throw ConfigError("fusion config: attention dim must be positive");
    if (gnn_variant == GnnVariant::kGat &&
        (gat_heads == 0 || hidden_dim % gat_heads != 0)) {
      throw ConfigError("fusion config: hidden_dim not divisible by gat_heads");
    }
  }
};

struct AblationFlags {
  bool no_soft_prompt = false;
  bool no_lora = false;
};

template <typename T>
struct FusionUnitParamsT {
  TensorT<T> struct_proj;  // [hidden x d_model], maps o^{l-1} into encoder space
  TensorT<T> w_q;          // [hidden x d_attn]
  TensorT<T> w_k;          // [d_model x d_attn]
  TensorT<T> w_v;          // [d_model x d_attn]
  TensorT<T> w_out;        // [d_attn x hidden]
  GnnLayerParamsT<T> gnn;

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) const {
    out.push_back({prefix + "struct_proj", struct_proj});
    out.push_back({prefix + "w_q", w_q});
    out.push_back({prefix + "w_k", w_k});
    out.push_back({prefix + "w_v", w_v});
    out.push_back({prefix + "w_out", w_out});
    gnn.collect_params(prefix + "gnn.", out);
  }
};

template <typename T>
struct StackStateT {
  std::vector<TensorT<T>> outputs;  // o^1 .. o^K

  const TensorT<T>& final_output() const { return outputs.back(); }
};

using StackState = StackStateT<float>;

/// Optional inspection hook for tests: cross-attention weights per unit and
/// GAT coefficients per unit (when the variant is gat).
template <typename T>
struct FusionCaptureT {
  std::vector<TensorT<T>> cross_attention;            // [N x 1 x P] per unit
  std::vector<std::vector<TensorT<T>>> gat_attention;  // per unit, per head
};

template <typename T>
struct FusionStackT {
  FusionStackConfig cfg;
  EncoderConfig enc_cfg;
  TensorT<T> input_proj;  // [feature_dim x hidden]
  std::vector<MiniEncoderT<T>> encoders;  // one, or one per unit
  std::vector<LoRASetT<T>> loras;         // parallel to encoders
  std::vector<FusionUnitParamsT<T>> units;

  static FusionStackT init(const FusionStackConfig& cfg, const EncoderConfig& enc_cfg,
                           std::size_t vocab_size, std::mt19937_64& rng);

  std::size_t attn_dim() const {
    return cfg.d_attn == 0 ? enc_cfg.d_model : cfg.d_attn;
  }
  const MiniEncoderT<T>& encoder_for(std::size_t unit) const {
    return encoders[cfg.share_encoder ? 0 : unit];
  }
  const LoRASetT<T>& lora_for(std::size_t unit) const {
    return loras[cfg.share_encoder ? 0 : unit];
  }

  /// Base encoder weights train only when `trainable`; adapters always train.
  void set_encoder_trainable(bool trainable) {
    for (auto& enc : encoders) enc.set_trainable(trainable);
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) const;

  TensorT<T> unit_forward(std::size_t unit, const TensorT<T>& o_prev,
                          const std::vector<TokenSequence>& padded_texts,
                          const CsrRef& csr, const AblationFlags& flags,
                          std::mt19937_64* dropout_rng = nullptr,
                          FusionCaptureT<T>* capture = nullptr) const;

  /// Full stack: o^0 = x * input_proj, then every unit in order. texts are
  /// per-node token sequences (not yet padded), aligned with the rows of x.
  StackStateT<T> forward(const TensorT<T>& x, const std::vector<TokenSequence>& texts,
                         const CsrRef& csr, const AblationFlags& flags = {},
                         std::mt19937_64* dropout_rng = nullptr,
                         FusionCaptureT<T>* capture = nullptr) const;
};

using FusionStack = FusionStackT<float>;

/// Prompt embedding for a single node, [(prefix + L) x d_model]. Layout:
/// [CLS] (cls pooling only), soft structural token (unless ablated), [SEP],
/// then the token embeddings of seq.
template <typename T>
TensorT<T> build_prompt(const TensorT<T>& o_prev_row, const TokenSequence& seq,
                        const FusionUnitParamsT<T>& unit, const MiniEncoderT<T>& enc,
                        Pooling pooling, bool no_soft_prompt = false);

// ---------------------------------------------------------------------------
// Template definitions

namespace detail {

/// One embedding row broadcast to [n x 1 x width].
template <typename T>
TensorT<T> broadcast_row(const TensorT<T>& table, std::size_t row, std::size_t n) {
  auto picked = take_rows(table, std::vector<std::size_t>{row});  // [1 x d]
  auto wide = matmul(TensorT<T>::ones({n, 1}), picked);           // [n x d]
  return reshape(wide, {n, 1, table.dim(1)});
}

template <typename T>
struct PromptBatch {
  TensorT<T> embeddings;  // [N x P x d_model]
  TensorT<T> mask;        // [N x P] constant
  std::size_t cls_pos = 0;
};

/// Assembles prompt embeddings for a batch of nodes. padded_texts must share
/// one length (possibly zero for an all-empty batch).
template <typename T>
PromptBatch<T> assemble_prompts(const TensorT<T>& o_prev,
                                const std::vector<TokenSequence>& padded_texts,
                                const FusionUnitParamsT<T>& unit,
                                const MiniEncoderT<T>& enc, Pooling pooling,
                                bool no_soft_prompt) {
  const std::size_t n = o_prev.dim(0);
  if (padded_texts.size() != n) {
    throw ContractError("fusion: " + std::to_string(padded_texts.size()) +
                        " texts for " + std::to_string(n) + " nodes");
  }
  const std::size_t text_len = padded_texts.empty() ? 0 : padded_texts[0].length();

  std::vector<TensorT<T>> parts;
  std::size_t prefix = 0;
  if (pooling == Pooling::kCls) {
    parts.push_back(broadcast_row(enc.tok_emb, Vocabulary::kCls, n));
    ++prefix;
  }
  if (!no_soft_prompt) {
    parts.push_back(reshape(matmul(o_prev, unit.struct_proj),
                            {n, 1, enc.cfg.d_model}));
    ++prefix;
  }
  parts.push_back(broadcast_row(enc.tok_emb, Vocabulary::kSep, n));
  ++prefix;
  if (text_len > 0) parts.push_back(enc.embed_ids(padded_texts));

  PromptBatch<T> out;
  out.embeddings = concat_dim1(parts);
  const std::size_t p = prefix + text_len;
  out.mask = TensorT<T>::zeros({n, p});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < prefix; ++j) out.mask.values()[i * p + j] = T(1);
    for (std::size_t j = 0; j < text_len; ++j) {
      out.mask.values()[i * p + prefix + j] =
          static_cast<T>(padded_texts[i].attention_mask[j]);
    }
  }
  out.cls_pos = 0;
  return out;
}

}  // namespace detail

template <typename T>
TensorT<T> build_prompt(const TensorT<T>& o_prev_row, const TokenSequence& seq,
                        const FusionUnitParamsT<T>& unit, const MiniEncoderT<T>& enc,
                        Pooling pooling, bool no_soft_prompt) {
  auto o = o_prev_row.rank() == 1 ? reshape(o_prev_row, {1, o_prev_row.dim(0)})
                                  : o_prev_row;
  auto batch = detail::assemble_prompts(o, {seq}, unit, enc, pooling, no_soft_prompt);
  const std::size_t p = batch.embeddings.dim(1);
  return reshape(batch.embeddings, {p, enc.cfg.d_model});
}

template <typename T>
FusionStackT<T> FusionStackT<T>::init(const FusionStackConfig& cfg,
                                      const EncoderConfig& enc_cfg,
                                      std::size_t vocab_size, std::mt19937_64& rng) {
  enc_cfg.validate();
  cfg.validate(enc_cfg);
  FusionStackT stack;
  stack.cfg = cfg;
  stack.enc_cfg = enc_cfg;
  const std::size_t h = cfg.hidden_dim, dm = enc_cfg.d_model;
  const std::size_t da = cfg.d_attn == 0 ? dm : cfg.d_attn;

  auto glorot = [&rng](std::size_t in, std::size_t out) {
    const T s = std::sqrt(T(2) / static_cast<T>(in + out));
    return TensorT<T>::randn({in, out}, s, rng).set_requires_grad(true);
  };

  stack.input_proj = glorot(cfg.feature_dim, h);
  const std::size_t n_encoders = cfg.share_encoder ? 1 : cfg.n_units;
  for (std::size_t e = 0; e < n_encoders; ++e) {
    stack.encoders.push_back(MiniEncoderT<T>::init(enc_cfg, vocab_size, rng));
    stack.loras.push_back(stack.encoders.back().make_lora(
        cfg.lora_rank, static_cast<T>(cfg.lora_alpha), rng));
  }
  for (std::size_t u = 0; u < cfg.n_units; ++u) {
    FusionUnitParamsT<T> unit;
    unit.struct_proj = glorot(h, dm);
    unit.w_q = glorot(h, da);
    unit.w_k = glorot(dm, da);
    unit.w_v = glorot(dm, da);
    unit.w_out = glorot(da, h);
    unit.gnn = GnnLayerParamsT<T>::init(cfg.gnn_variant, h, h, cfg.gat_heads, rng);
    stack.units.push_back(std::move(unit));
  }
  return stack;
}

template <typename T>
void FusionStackT<T>::collect_params(const std::string& prefix,
                                     std::vector<ParamRef<T>>& out) const {
  out.push_back({prefix + "input_proj", input_proj});
  for (std::size_t e = 0; e < encoders.size(); ++e) {
    const std::string ep = prefix + "encoder" + std::to_string(e) + ".";
    encoders[e].collect_params(ep, out);
    for (std::size_t i = 0; i < loras[e].q.size(); ++i) {
      out.push_back({ep + "lora.q" + std::to_string(i) + ".a", loras[e].q[i].a});
      out.push_back({ep + "lora.q" + std::to_string(i) + ".b", loras[e].q[i].b});
      out.push_back({ep + "lora.v" + std::to_string(i) + ".a", loras[e].v[i].a});
      out.push_back({ep + "lora.v" + std::to_string(i) + ".b", loras[e].v[i].b});
    }
  }
  for (std::size_t u = 0; u < units.size(); ++u) {
    units[u].collect_params(prefix + "unit" + std::to_string(u) + ".", out);
  }
}

template <typename T>
TensorT<T> FusionStackT<T>::unit_forward(std::size_t unit_idx, const TensorT<T>& o_prev,
                                         const std::vector<TokenSequence>& padded_texts,
                                         const CsrRef& csr, const AblationFlags& flags,
                                         std::mt19937_64* dropout_rng,
                                         FusionCaptureT<T>* capture) const {
  const auto& unit = units[unit_idx];
  const auto& enc = encoder_for(unit_idx);
  const LoRASetT<T>* lora = flags.no_lora ? nullptr : &lora_for(unit_idx);
  const std::size_t n = o_prev.dim(0);
  const std::size_t da = attn_dim();

  auto prompt = detail::assemble_prompts(o_prev, padded_texts, unit, enc, cfg.pooling,
                                         flags.no_soft_prompt);
  auto hidden = enc.forward(prompt.embeddings, prompt.mask, lora, dropout_rng);

  auto q = reshape(matmul(o_prev, unit.w_q), {n, 1, da});
  auto keys = matmul(hidden, unit.w_k);
  auto values = matmul(hidden, unit.w_v);
  auto scores = scale(matmul(q, transpose_last(keys)),
                      T(1) / std::sqrt(static_cast<T>(da)));
  scores = add(scores, detail::key_bias(prompt.mask));
  auto probs = softmax_rows(scores);
  if (capture != nullptr) capture->cross_attention.push_back(probs);
  auto ctx = reshape(matmul(probs, values), {n, da});
  auto z = matmul(ctx, unit.w_out);

  std::vector<TensorT<T>> gat_attn;
  auto o_next = gnn_layer(z, csr, unit.gnn, capture ? &gat_attn : nullptr);
  if (capture != nullptr) capture->gat_attention.push_back(std::move(gat_attn));
  return o_next;
}

template <typename T>
StackStateT<T> FusionStackT<T>::forward(const TensorT<T>& x,
                                        const std::vector<TokenSequence>& texts,
                                        const CsrRef& csr, const AblationFlags& flags,
                                        std::mt19937_64* dropout_rng,
                                        FusionCaptureT<T>* capture) const {
  if (x.rank() != 2 || x.dim(0) != csr.num_nodes || x.dim(1) != cfg.feature_dim) {
    throw ContractError("fusion forward: features " + shape_str(x.shape()) +
                        " do not match subgraph with " +
                        std::to_string(csr.num_nodes) + " nodes");
  }
  auto padded = pad_batch(texts);
  StackStateT<T> state;
  auto o = matmul(x, input_proj);
  for (std::size_t u = 0; u < units.size(); ++u) {
    o = unit_forward(u, o, padded, csr, flags, dropout_rng, capture);
    state.outputs.push_back(o);
  }
  return state;
}

}  // namespace bigtex
