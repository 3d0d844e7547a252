#pragma once

// Tokenization and a small encoder-only transformer. The encoder consumes
// content embeddings rather than raw ids so that callers can prepend
// non-vocabulary positions (the soft structural token) to a sequence.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "bigtex/errors.hpp"
#include "bigtex/lora.hpp"
#include "bigtex/optim.hpp"
#include "bigtex/tensor.hpp"

namespace bigtex {

// ---------------------------------------------------------------------------
// Vocabulary and token sequences

struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kNumSpecials = 5;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  int size() const { return static_cast<int>(id_to_token.size()); }
  int id_of(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
};

/// Lowercased alphanumeric runs; whitespace and punctuation separate tokens.
std::vector<std::string> split_words(const std::string& text);

/// Frequency-sorted vocabulary (ties broken lexicographically) capped at
/// max_size entries including the specials.
Vocabulary build_vocab(const std::vector<std::string>& texts, std::size_t min_freq,
                       std::size_t max_size);

struct TokenSequence {
  std::vector<int> ids;
  std::vector<std::uint8_t> attention_mask;  // 1 for real tokens, 0 for padding

  std::size_t length() const { return ids.size(); }
};

/// Maps text to ids, truncating to max_len. No [CLS]/[SEP] are added here;
/// prompt layout is owned by the fusion stage.
TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                       std::size_t max_len);

/// Pads sequences to a common length with [PAD] / mask 0.
std::vector<TokenSequence> pad_batch(std::vector<TokenSequence> seqs);

// ---------------------------------------------------------------------------
// Mini encoder

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_len = 64;        // text tokens per node
  std::size_t max_positions = 67;  // max_len plus prompt slots ([CLS], struct, [SEP])
  double dropout = 0.1;

  void validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || ffn_dim == 0 ||
        max_len == 0 || max_positions < max_len) {
      throw ConfigError("encoder config: dimensions must be positive and "
                        "max_positions >= max_len");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("encoder config: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    }
  }
};

enum class Pooling { kCls, kMean };

template <typename T>
struct EncoderLayerT {
  TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<T> w1, b1, w2, b2;
  TensorT<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

/// LoRA adapters for the Q and V projections of every layer.
template <typename T>
struct LoRASetT {
  std::vector<LoRAAdapterT<T>> q;
  std::vector<LoRAAdapterT<T>> v;
};

using LoRASet = LoRASetT<float>;

template <typename T>
struct MiniEncoderT {
  EncoderConfig cfg;
  std::size_t vocab_size = 0;
  TensorT<T> tok_emb;  // [V x d_model]
  TensorT<T> pos_emb;  // [max_positions x d_model]
  std::vector<EncoderLayerT<T>> layers;

  static MiniEncoderT init(const EncoderConfig& cfg, std::size_t vocab_size,
                           std::mt19937_64& rng);

  LoRASetT<T> make_lora(std::size_t rank, T alpha, std::mt19937_64& rng) const;

  void set_trainable(bool trainable);
  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) const;

  /// Embeds padded token id rows into [B x L x d_model] content embeddings.
  TensorT<T> embed_ids(const std::vector<TokenSequence>& batch) const;

  /// Adds positional embeddings and runs every layer. x holds content
  /// embeddings [B x L x d_model]; mask is a constant [B x L] 0/1 tensor.
  /// Dropout is active only when rng is non-null.
  TensorT<T> forward(const TensorT<T>& x, const TensorT<T>& mask,
                     const LoRASetT<T>* lora = nullptr,
                     std::mt19937_64* dropout_rng = nullptr) const;

  /// Pooled readout: hidden at cls_pos (kCls) or the mask-weighted mean over
  /// non-pad positions (kMean).
  TensorT<T> pool(const TensorT<T>& hidden, const TensorT<T>& mask, Pooling mode,
                  std::size_t cls_pos = 0) const;
};

using MiniEncoder = MiniEncoderT<float>;

/// Attention mask as a constant tensor usable by forward/pool.
template <typename T>
TensorT<T> mask_tensor(const std::vector<TokenSequence>& batch) {
  const std::size_t b = batch.size(), l = batch.empty() ? 0 : batch[0].length();
  auto mask = TensorT<T>::zeros({b, l});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < l; ++j)
      mask.values()[i * l + j] = static_cast<T>(batch[i].attention_mask[j]);
  return mask;
}

/// One multi-head self-attention block over x [B x L x d] (or [L x d],
/// treated as batch 1). mask, when defined, is [B x L] with 1 for real
/// positions; masked and causal-excluded keys receive -1e9 before softmax.
template <typename T>
TensorT<T> self_attention(const TensorT<T>& x, const EncoderLayerT<T>& params,
                          std::size_t n_heads, const TensorT<T>& mask = {},
                          bool causal = false,
                          const LoRAAdapterT<T>* lora_q = nullptr,
                          const LoRAAdapterT<T>* lora_v = nullptr,
                          std::mt19937_64* dropout_rng = nullptr,
                          double dropout = 0.0);

// ---------------------------------------------------------------------------
// Masked language model pretraining (Vocabulary::kMask corruption)

struct MlmStepResult {
  float loss = 0;
  std::size_t masked_positions = 0;
};

/// One MLM step: corrupt, forward, backprop, optimizer update. Of the
/// selected positions, 80% become [MASK], 10% a random token, 10% stay.
MlmStepResult mlm_pretrain_step(MiniEncoder& encoder, const Vocabulary& vocab,
                                const std::vector<TokenSequence>& batch,
                                float mask_prob, std::mt19937_64& rng, Adam& opt);

/// Forward-only MLM loss on an uncorrupted-selection basis, for monitoring.
float mlm_eval_loss(const MiniEncoder& encoder, const Vocabulary& vocab,
                    const std::vector<TokenSequence>& batch, float mask_prob,
                    std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Template definitions

namespace detail {

/// Additive key bias [B x 1 x L]: 0 at real positions, -1e9 at padding.
template <typename T>
TensorT<T> key_bias(const TensorT<T>& mask) {
  const std::size_t b = mask.dim(0), l = mask.dim(1);
  auto bias = TensorT<T>::zeros({b, 1, l});
  for (std::size_t i = 0; i < b * l; ++i)
    bias.values()[i] = (mask.values()[i] > T(0)) ? T(0) : T(-1e9);
  return bias;
}

template <typename T>
TensorT<T> causal_bias(std::size_t l) {
  auto bias = TensorT<T>::zeros({l, l});
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = i + 1; j < l; ++j) bias.values()[i * l + j] = T(-1e9);
  return bias;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  return add_bias(matmul(x, w), b);
}

}  // namespace detail

template <typename T>
TensorT<T> self_attention(const TensorT<T>& x, const EncoderLayerT<T>& params,
                          std::size_t n_heads, const TensorT<T>& mask, bool causal,
                          const LoRAAdapterT<T>* lora_q, const LoRAAdapterT<T>* lora_v,
                          std::mt19937_64* dropout_rng, double dropout) {
  const bool rank2 = (x.rank() == 2);
  TensorT<T> h = rank2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
  const std::size_t batch = h.dim(0), l = h.dim(1), d = h.dim(2);
  if (d % n_heads != 0) {
    throw DimensionError("self_attention: d_model " + std::to_string(d) +
                         " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const std::size_t dk = d / n_heads;

  auto wq = lora_q ? effective_weight(params.wq, *lora_q) : params.wq;
  auto wv = lora_v ? effective_weight(params.wv, *lora_v) : params.wv;
  auto q = detail::linear(h, wq, params.bq);
  auto k = detail::linear(h, params.wk, params.bk);
  auto v = detail::linear(h, wv, params.bv);

  TensorT<T> bias;
  if (mask.defined()) bias = detail::key_bias(mask);
  TensorT<T> tri;
  if (causal) tri = detail::causal_bias<T>(l);

  const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));
  std::vector<TensorT<T>> head_ctx;
  head_ctx.reserve(n_heads);
  for (std::size_t hd = 0; hd < n_heads; ++hd) {
    auto qh = slice_lastdim(q, hd * dk, dk);
    auto kh = slice_lastdim(k, hd * dk, dk);
    auto vh = slice_lastdim(v, hd * dk, dk);
    auto scores = scale(matmul(qh, transpose_last(kh)), inv_sqrt_dk);
    if (bias.defined()) scores = add_bcast1(scores, bias);
    if (tri.defined()) scores = add_bcast_batch(scores, tri);
    auto probs = softmax_rows(scores);
    head_ctx.push_back(matmul(probs, vh));
  }
  auto ctx = n_heads == 1 ? head_ctx[0] : concat_lastdim(head_ctx);
  auto out = detail::linear(ctx, params.wo, params.bo);
  if (dropout_rng != nullptr && dropout > 0.0) {
    out = apply_dropout(out, static_cast<T>(dropout), *dropout_rng, true);
  }
  (void)batch;
  return rank2 ? reshape(out, {l, d}) : out;
}

template <typename T>
MiniEncoderT<T> MiniEncoderT<T>::init(const EncoderConfig& cfg, std::size_t vocab_size,
                                      std::mt19937_64& rng) {
  cfg.validate();
  if (vocab_size < Vocabulary::kNumSpecials) {
    throw ConfigError("encoder: vocabulary smaller than the special tokens");
  }
  MiniEncoderT enc;
  enc.cfg = cfg;
  enc.vocab_size = vocab_size;
  const std::size_t d = cfg.d_model;
  const T s = T(0.02);
  enc.tok_emb = TensorT<T>::randn({vocab_size, d}, s, rng).set_requires_grad(true);
  enc.pos_emb = TensorT<T>::randn({cfg.max_positions, d}, s, rng).set_requires_grad(true);
  enc.layers.resize(cfg.n_layers);
  for (auto& layer : enc.layers) {
    layer.wq = TensorT<T>::randn({d, d}, s, rng).set_requires_grad(true);
    layer.wk = TensorT<T>::randn({d, d}, s, rng).set_requires_grad(true);
    layer.wv = TensorT<T>::randn({d, d}, s, rng).set_requires_grad(true);
    layer.wo = TensorT<T>::randn({d, d}, s, rng).set_requires_grad(true);
    layer.bq = TensorT<T>::zeros({d}).set_requires_grad(true);
    layer.bk = TensorT<T>::zeros({d}).set_requires_grad(true);
    layer.bv = TensorT<T>::zeros({d}).set_requires_grad(true);
    layer.bo = TensorT<T>::zeros({d}).set_requires_grad(true);
    layer.w1 = TensorT<T>::randn({d, cfg.ffn_dim}, s, rng).set_requires_grad(true);
    layer.b1 = TensorT<T>::zeros({cfg.ffn_dim}).set_requires_grad(true);
    layer.w2 = TensorT<T>::randn({cfg.ffn_dim, d}, s, rng).set_requires_grad(true);
    layer.b2 = TensorT<T>::zeros({d}).set_requires_grad(true);
    layer.ln1_gamma = TensorT<T>::ones({d}).set_requires_grad(true);
    layer.ln1_beta = TensorT<T>::zeros({d}).set_requires_grad(true);
    layer.ln2_gamma = TensorT<T>::ones({d}).set_requires_grad(true);
    layer.ln2_beta = TensorT<T>::zeros({d}).set_requires_grad(true);
  }
  return enc;
}

template <typename T>
LoRASetT<T> MiniEncoderT<T>::make_lora(std::size_t rank, T alpha,
                                       std::mt19937_64& rng) const {
  LoRASetT<T> set;
  const std::size_t d = cfg.d_model;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    set.q.push_back(init_adapter<T>(d, d, rank, alpha, rng,
                                    "encoder.layer" + std::to_string(i) + ".wq"));
    set.v.push_back(init_adapter<T>(d, d, rank, alpha, rng,
                                    "encoder.layer" + std::to_string(i) + ".wv"));
  }
  return set;
}

template <typename T>
void MiniEncoderT<T>::set_trainable(bool trainable) {
  std::vector<ParamRef<T>> params;
  collect_params("", params);
  for (auto& p : params) p.tensor.set_requires_grad(trainable);
}

template <typename T>
void MiniEncoderT<T>::collect_params(const std::string& prefix,
                                     std::vector<ParamRef<T>>& out) const {
  out.push_back({prefix + "tok_emb", tok_emb});
  out.push_back({prefix + "pos_emb", pos_emb});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string lp = prefix + "layer" + std::to_string(i) + ".";
    const auto& l = layers[i];
    out.push_back({lp + "wq", l.wq});
    out.push_back({lp + "bq", l.bq});
    out.push_back({lp + "wk", l.wk});
    out.push_back({lp + "bk", l.bk});
    out.push_back({lp + "wv", l.wv});
    out.push_back({lp + "bv", l.bv});
    out.push_back({lp + "wo", l.wo});
    out.push_back({lp + "bo", l.bo});
    out.push_back({lp + "w1", l.w1});
    out.push_back({lp + "b1", l.b1});
    out.push_back({lp + "w2", l.w2});
    out.push_back({lp + "b2", l.b2});
    out.push_back({lp + "ln1_gamma", l.ln1_gamma});
    out.push_back({lp + "ln1_beta", l.ln1_beta});
    out.push_back({lp + "ln2_gamma", l.ln2_gamma});
    out.push_back({lp + "ln2_beta", l.ln2_beta});
  }
}

template <typename T>
TensorT<T> MiniEncoderT<T>::embed_ids(const std::vector<TokenSequence>& batch) const {
  if (batch.empty() || batch[0].length() == 0) {
    throw ContractError("embed_ids: empty batch");
  }
  const std::size_t b = batch.size(), l = batch[0].length();
  std::vector<int> flat;
  flat.reserve(b * l);
  for (const auto& seq : batch) {
    if (seq.length() != l) throw ContractError("embed_ids: batch not padded");
    flat.insert(flat.end(), seq.ids.begin(), seq.ids.end());
  }
  return reshape(embedding_lookup(tok_emb, flat), {b, l, cfg.d_model});
}

template <typename T>
TensorT<T> MiniEncoderT<T>::forward(const TensorT<T>& x, const TensorT<T>& mask,
                                    const LoRASetT<T>* lora,
                                    std::mt19937_64* dropout_rng) const {
  if (x.rank() != 3 || x.dim(2) != cfg.d_model) {
    throw DimensionError("encoder forward: expected [B x L x d_model], got " +
                         shape_str(x.shape()));
  }
  const std::size_t l = x.dim(1);
  if (l > cfg.max_positions) {
    throw ContractError("encoder forward: sequence length " + std::to_string(l) +
                        " exceeds positional table " + std::to_string(cfg.max_positions));
  }
  std::vector<std::size_t> pos_ids(l);
  for (std::size_t i = 0; i < l; ++i) pos_ids[i] = i;
  auto h = add_bcast_batch(x, take_rows(pos_emb, pos_ids));
  const T eps = T(1e-5);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& layer = layers[i];
    const LoRAAdapterT<T>* lq = (lora && i < lora->q.size()) ? &lora->q[i] : nullptr;
    const LoRAAdapterT<T>* lv = (lora && i < lora->v.size()) ? &lora->v[i] : nullptr;
    auto attn = self_attention(h, layer, cfg.n_heads, mask, false, lq, lv, dropout_rng,
                               cfg.dropout);
    h = layer_norm(add(h, attn), layer.ln1_gamma, layer.ln1_beta, eps);
    auto ff = detail::linear(gelu(detail::linear(h, layer.w1, layer.b1)), layer.w2,
                             layer.b2);
    if (dropout_rng != nullptr && cfg.dropout > 0.0) {
      ff = apply_dropout(ff, static_cast<T>(cfg.dropout), *dropout_rng, true);
    }
    h = layer_norm(add(h, ff), layer.ln2_gamma, layer.ln2_beta, eps);
  }
  return h;
}

template <typename T>
TensorT<T> MiniEncoderT<T>::pool(const TensorT<T>& hidden, const TensorT<T>& mask,
                                 Pooling mode, std::size_t cls_pos) const {
  const std::size_t b = hidden.dim(0), l = hidden.dim(1), d = hidden.dim(2);
  if (mode == Pooling::kCls) {
    return reshape(slice_dim1(hidden, cls_pos, 1), {b, d});
  }
  auto weights = TensorT<T>::zeros({b, 1, l});
  for (std::size_t i = 0; i < b; ++i) {
    T count = T(0);
    for (std::size_t j = 0; j < l; ++j) count += mask.values()[i * l + j];
    const T inv = T(1) / std::max(count, T(1));
    for (std::size_t j = 0; j < l; ++j)
      weights.values()[i * l + j] = mask.values()[i * l + j] * inv;
  }
  return reshape(matmul(weights, hidden), {b, d});
}

}  // namespace bigtex
