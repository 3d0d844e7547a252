#pragma once

// Classification head, masked loss, the mini-batch training loop over
// neighbor-sampled subgraphs, and checkpointing. The full model couples the
// fusion stack to an MLP head; two reduced modes (text-only, structure-only)
// train the same head on a single modality for baseline comparisons.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bigtex/errors.hpp"
#include "bigtex/fusion.hpp"
#include "bigtex/gnn.hpp"
#include "bigtex/graph.hpp"
#include "bigtex/optim.hpp"
#include "bigtex/tensor.hpp"
#include "bigtex/text.hpp"

namespace bigtex {

/// Deterministic stream splitting for nested seeds (splitmix64 steps).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  std::uint64_t x = a;
  for (std::uint64_t w : {b, c}) {
    x += 0x9e3779b97f4a7c15ULL + w;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    x ^= x >> 31;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Classification head (two-layer MLP, ReLU between)

template <typename T>
struct ClassifierT {
  TensorT<T> w1, b1, w2, b2;

  static ClassifierT init(std::size_t in_dim, std::size_t n_classes,
                          std::mt19937_64& rng) {
    if (in_dim == 0 || n_classes == 0) {
      throw ConfigError("classifier: dimensions must be positive");
    }
    ClassifierT c;
    const T s1 = std::sqrt(T(2) / static_cast<T>(in_dim + in_dim));
    const T s2 = std::sqrt(T(2) / static_cast<T>(in_dim + n_classes));
    c.w1 = TensorT<T>::randn({in_dim, in_dim}, s1, rng).set_requires_grad(true);
    c.b1 = TensorT<T>::zeros({in_dim}).set_requires_grad(true);
    c.w2 = TensorT<T>::randn({in_dim, n_classes}, s2, rng).set_requires_grad(true);
    c.b2 = TensorT<T>::zeros({n_classes}).set_requires_grad(true);
    return c;
  }

  TensorT<T> forward(const TensorT<T>& h) const {
    return add_bias(matmul(relu(add_bias(matmul(h, w1), b1)), w2), b2);
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) const {
    out.push_back({prefix + "w1", w1});
    out.push_back({prefix + "b1", b1});
    out.push_back({prefix + "w2", w2});
    out.push_back({prefix + "b2", b2});
  }
};

using Classifier = ClassifierT<float>;

/// Cross-entropy over the selected rows only; rows outside `mask_rows`
/// (sampled non-seed nodes) do not contribute.
template <typename T>
TensorT<T> masked_loss(const TensorT<T>& logits, const std::vector<int>& row_labels,
                       const std::vector<std::size_t>& mask_rows) {
  if (mask_rows.empty()) throw ContractError("masked_loss: empty mask");
  if (row_labels.size() != logits.dim(0)) {
    throw DimensionError("masked_loss: " + std::to_string(row_labels.size()) +
                         " labels for " + std::to_string(logits.dim(0)) + " rows");
  }
  std::vector<int> picked;
  picked.reserve(mask_rows.size());
  for (const std::size_t r : mask_rows) picked.push_back(row_labels[r]);
  return cross_entropy_loss(take_rows(logits, mask_rows), picked);
}

// ---------------------------------------------------------------------------
// Model assembly

enum class ModelMode { kFull, kTextOnly, kStructureOnly };

ModelMode model_mode_from_name(const std::string& name);
const char* model_mode_name(ModelMode m);

struct ModelConfig {
  ModelMode mode = ModelMode::kFull;
  EncoderConfig encoder;
  FusionStackConfig fusion;  // feature_dim must match the graph
  AblationFlags ablation;
  std::size_t n_classes = 0;
};

template <typename T>
struct BigTexModelT {
  ModelConfig cfg;
  Vocabulary vocab;

  FusionStackT<T> stack;                       // kFull
  MiniEncoderT<T> text_encoder;                // kTextOnly
  TensorT<T> struct_proj_in;                   // kStructureOnly
  std::vector<GnnLayerParamsT<T>> struct_gnn;  // kStructureOnly
  ClassifierT<T> head;

  static BigTexModelT init(const ModelConfig& cfg, Vocabulary vocab,
                           std::mt19937_64& rng) {
    if (cfg.n_classes == 0) throw ConfigError("model: n_classes must be positive");
    BigTexModelT m;
    m.cfg = cfg;
    m.vocab = std::move(vocab);
    std::size_t rep_dim = 0;
    switch (cfg.mode) {
      case ModelMode::kFull:
        m.stack = FusionStackT<T>::init(cfg.fusion, cfg.encoder, m.vocab.size(), rng);
        m.stack.set_encoder_trainable(false);  // frozen base + LoRA adapters
        rep_dim = cfg.fusion.hidden_dim;
        break;
      case ModelMode::kTextOnly:
        m.text_encoder = MiniEncoderT<T>::init(cfg.encoder, m.vocab.size(), rng);
        rep_dim = cfg.encoder.d_model;
        break;
      case ModelMode::kStructureOnly: {
        const std::size_t h = cfg.fusion.hidden_dim;
        const T s = std::sqrt(T(2) / static_cast<T>(cfg.fusion.feature_dim + h));
        m.struct_proj_in = TensorT<T>::randn({cfg.fusion.feature_dim, h}, s, rng)
                               .set_requires_grad(true);
        for (std::size_t u = 0; u < cfg.fusion.n_units; ++u) {
          m.struct_gnn.push_back(GnnLayerParamsT<T>::init(
              cfg.fusion.gnn_variant, h, h, cfg.fusion.gat_heads, rng));
        }
        rep_dim = h;
        break;
      }
    }
    m.head = ClassifierT<T>::init(rep_dim, cfg.n_classes, rng);
    return m;
  }

  /// Node representations for a batch subgraph (the final fusion output,
  /// pooled text encoding, or stacked GNN output depending on mode).
  TensorT<T> representations(const TensorT<T>& x,
                             const std::vector<TokenSequence>& texts,
                             const CsrRef& csr,
                             std::mt19937_64* dropout_rng = nullptr) const {
    switch (cfg.mode) {
      case ModelMode::kFull:
        return stack.forward(x, texts, csr, cfg.ablation, dropout_rng)
            .final_output();
      case ModelMode::kTextOnly: {
        auto padded = pad_batch(texts);
        if (padded.empty() || padded[0].length() == 0) {
          // all-empty batch: fall back to a lone [SEP] per node
          TokenSequence sep;
          sep.ids = {Vocabulary::kSep};
          sep.attention_mask = {1};
          padded.assign(texts.size(), sep);
        }
        auto mask = mask_tensor<T>(padded);
        auto hidden = text_encoder.forward(text_encoder.embed_ids(padded), mask,
                                           nullptr, dropout_rng);
        return text_encoder.pool(hidden, mask, cfg.fusion.pooling);
      }
      case ModelMode::kStructureOnly: {
        auto o = matmul(x, struct_proj_in);
        for (const auto& layer : struct_gnn) o = gnn_layer(o, csr, layer);
        return o;
      }
    }
    throw ContractError("model: unknown mode");
  }

  TensorT<T> logits(const TensorT<T>& x, const std::vector<TokenSequence>& texts,
                    const CsrRef& csr, std::mt19937_64* dropout_rng = nullptr) const {
    return head.forward(representations(x, texts, csr, dropout_rng));
  }

  void collect_params(std::vector<ParamRef<T>>& out) const {
    switch (cfg.mode) {
      case ModelMode::kFull:
        stack.collect_params("stack.", out);
        break;
      case ModelMode::kTextOnly:
        text_encoder.collect_params("encoder.", out);
        break;
      case ModelMode::kStructureOnly:
        out.push_back({"proj.w", struct_proj_in});
        for (std::size_t u = 0; u < struct_gnn.size(); ++u) {
          struct_gnn[u].collect_params("gnn" + std::to_string(u) + ".", out);
        }
        break;
    }
    head.collect_params("head.", out);
  }

  /// Parameters the optimizer may move. Disabled adapters (no_lora) and the
  /// unused structural projection (no_soft_prompt) are excluded along with
  /// everything frozen.
  std::vector<ParamRef<T>> trainable_params() const {
    std::vector<ParamRef<T>> all;
    collect_params(all);
    std::vector<ParamRef<T>> out;
    for (auto& p : all) {
      if (!p.tensor.requires_grad()) continue;
      if (cfg.mode == ModelMode::kFull) {
        if (cfg.ablation.no_lora && p.path.find(".lora.") != std::string::npos) {
          continue;
        }
        if (cfg.ablation.no_soft_prompt &&
            p.path.find("struct_proj") != std::string::npos) {
          continue;
        }
      }
      out.push_back(std::move(p));
    }
    return out;
  }
};

using BigTexModel = BigTexModelT<float>;

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  float learning_rate = 1e-4f;
  float weight_decay = 1e-5f;
  float grad_clip = 5.0f;
  std::size_t batch_size = 6;
  std::size_t epochs = 10;
  std::vector<std::size_t> fanouts = {10, 10};
  std::uint64_t seed = 1;

  void validate(std::size_t n_units) const {
    if (learning_rate <= 0 || batch_size == 0 || epochs == 0) {
      throw ConfigError("train config: learning_rate, batch_size, epochs "
                        "must be positive");
    }
    if (weight_decay < 0 || grad_clip < 0) {
      throw ConfigError("train config: weight_decay and grad_clip must be >= 0");
    }
    if (fanouts.size() != n_units) {
      throw ConfigError("train config: " + std::to_string(fanouts.size()) +
                        " fanouts for " + std::to_string(n_units) + " units");
    }
  }
};

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;  // detached f32 copies
  std::string config_json;  // run config snapshot, rng state, epoch counter
  std::uint32_t epoch = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Copies checkpoint tensors into a freshly initialized model, matched by
/// parameter path. Throws LoadError on any mismatch.
void restore_into(BigTexModel& model, const Checkpoint& ckpt);

Checkpoint snapshot_model(const BigTexModel& model, const std::string& config_json,
                          std::uint32_t epoch);

struct EpochMetrics {
  float train_loss = 0;
  float val_accuracy = 0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochMetrics> epochs;
  float best_val_accuracy = 0;
  std::size_t best_epoch = 0;
};

/// Accuracy of the model over the nodes of a split, with deterministic
/// neighbor sampling derived from `seed`.
float evaluate_split(const TextAttributedGraph& g, const BigTexModel& model,
                     Split split, const TrainConfig& cfg);

/// Mini-batch training: per epoch, shuffled train seeds are expanded by
/// neighbor sampling and stepped with Adam; the best-validation-accuracy
/// checkpoint is returned.
TrainResult train(const TextAttributedGraph& g, BigTexModel& model,
                  const TrainConfig& cfg, const std::string& config_json = "{}");

/// Final-layer representations for every node, batched deterministically.
/// Rows follow node ids.
std::vector<float> embed_all_nodes(const TextAttributedGraph& g,
                                   const BigTexModel& model, const TrainConfig& cfg,
                                   std::size_t* rep_dim_out);

}  // namespace bigtex
