#include "bigtex/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "bigtex/serialize.hpp"

namespace bigtex {

ModelMode model_mode_from_name(const std::string& name) {
  if (name == "full") return ModelMode::kFull;
  if (name == "text_only") return ModelMode::kTextOnly;
  if (name == "structure_only") return ModelMode::kStructureOnly;
  throw ConfigError("unknown model mode '" + name +
                    "' (expected full|text_only|structure_only)");
}

const char* model_mode_name(ModelMode m) {
  switch (m) {
    case ModelMode::kFull: return "full";
    case ModelMode::kTextOnly: return "text_only";
    case ModelMode::kStructureOnly: return "structure_only";
  }
  return "full";
}

namespace {

constexpr std::uint64_t kEvalSalt = 0xeba1;
constexpr std::uint64_t kEmbedSalt = 0xe3bed;
constexpr std::uint64_t kDropoutSalt = 0xd409;
constexpr std::uint64_t kOrderSalt = 0x04de4;

struct Batch {
  SampledSubgraph sub;
  Tensor x;                          // [N x d_x]
  std::vector<TokenSequence> texts;  // per local node
  std::vector<int> labels;           // per local node, -1 when absent
};

Batch make_batch(const TextAttributedGraph& g, const BigTexModel& model,
                 const std::vector<std::size_t>& seeds,
                 const std::vector<std::size_t>& fanouts, std::uint64_t sample_seed) {
  Batch b;
  b.sub = neighbor_sample(g, seeds, fanouts, sample_seed);
  const std::size_t n = b.sub.num_nodes();
  b.x = Tensor::zeros({n, std::max<std::size_t>(g.feature_dim, 1)});
  if (g.feature_dim > 0) {
    for (std::size_t i = 0; i < n; ++i) {
      const float* src = g.features.data() + b.sub.local_to_global[i] * g.feature_dim;
      std::copy_n(src, g.feature_dim, b.x.data() + i * g.feature_dim);
    }
  }
  const bool needs_text = model.cfg.mode != ModelMode::kStructureOnly;
  b.texts.resize(n);
  if (needs_text) {
    for (std::size_t i = 0; i < n; ++i) {
      b.texts[i] = tokenize(g.texts[b.sub.local_to_global[i]], model.vocab,
                            model.cfg.encoder.max_len);
    }
  }
  b.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    b.labels[i] = g.labels[b.sub.local_to_global[i]];
  }
  return b;
}

std::vector<std::size_t> fanouts_for_mode(const BigTexModel& model,
                                          const TrainConfig& cfg) {
  if (model.cfg.mode == ModelMode::kTextOnly) {
    return std::vector<std::size_t>(cfg.fanouts.size(), 0);  // no neighbors needed
  }
  return cfg.fanouts;
}

}  // namespace

float evaluate_split(const TextAttributedGraph& g, const BigTexModel& model,
                     Split split, const TrainConfig& cfg) {
  const auto ids = g.nodes_in_split(split);
  if (ids.empty()) throw ContractError("evaluate_split: no nodes in split");
  const auto fanouts = fanouts_for_mode(model, cfg);
  std::size_t correct = 0;
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < ids.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(start + cfg.batch_size, ids.size());
    std::vector<std::size_t> seeds(ids.begin() + start, ids.begin() + end);
    auto batch = make_batch(g, model, seeds, fanouts,
                            mix_seed(cfg.seed, kEvalSalt, batch_index++));
    auto logits = model.logits(batch.x, batch.texts, CsrRef::of(batch.sub));
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const float* row = logits.data() + i * c;
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j) {
        if (row[j] > row[best]) best = j;
      }
      if (static_cast<int>(best) == batch.labels[i]) ++correct;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(ids.size());
}

TrainResult train(const TextAttributedGraph& g, BigTexModel& model,
                  const TrainConfig& cfg, const std::string& config_json) {
  const std::size_t hops = model.cfg.mode == ModelMode::kTextOnly
                               ? cfg.fanouts.size()
                               : model.cfg.fusion.n_units;
  cfg.validate(hops);
  auto train_ids = g.nodes_in_split(Split::kTrain);
  if (train_ids.empty()) throw ContractError("train: graph has no train nodes");

  Adam opt(model.trainable_params(), cfg.learning_rate, cfg.weight_decay,
           cfg.grad_clip);
  const auto fanouts = fanouts_for_mode(model, cfg);

  TrainResult result;
  result.best_val_accuracy = -1.0f;
  const bool has_val = !g.nodes_in_split(Split::kVal).empty();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, kOrderSalt, epoch));
    std::shuffle(train_ids.begin(), train_ids.end(), shuffle_rng);

    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train_ids.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, train_ids.size());
      std::vector<std::size_t> seeds(train_ids.begin() + start,
                                     train_ids.begin() + end);
      auto batch = make_batch(g, model, seeds, fanouts,
                              mix_seed(cfg.seed, epoch, batches));
      std::vector<std::size_t> mask;
      for (std::size_t i = 0; i < seeds.size(); ++i) {
        if (batch.labels[i] >= 0) mask.push_back(i);
      }
      std::mt19937_64 dropout_rng(mix_seed(cfg.seed, kDropoutSalt,
                                           epoch * 1000003 + batches));
      Tape tape;
      Tape::Scope scope(tape);
      auto logits = model.logits(batch.x, batch.texts, CsrRef::of(batch.sub),
                                 &dropout_rng);
      auto loss = masked_loss(logits, batch.labels, mask);
      const float loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch) + ", batch " +
                           std::to_string(batches));
      }
      tape.backward(loss);
      opt.step();
      opt.zero_grad();
      loss_sum += loss_value;
      ++batches;
    }

    EpochMetrics metrics;
    metrics.train_loss = static_cast<float>(loss_sum / std::max<std::size_t>(batches, 1));
    metrics.val_accuracy =
        has_val ? evaluate_split(g, model, Split::kVal, cfg) : 0.0f;
    result.epochs.push_back(metrics);

    if (!has_val || metrics.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = metrics.val_accuracy;
      result.best_epoch = epoch;
      result.best = snapshot_model(model, config_json,
                                   static_cast<std::uint32_t>(epoch));
    }
  }
  return result;
}

std::vector<float> embed_all_nodes(const TextAttributedGraph& g,
                                   const BigTexModel& model, const TrainConfig& cfg,
                                   std::size_t* rep_dim_out) {
  const auto fanouts = fanouts_for_mode(model, cfg);
  std::vector<float> out;
  std::size_t rep_dim = 0;
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < g.num_nodes; start += cfg.batch_size) {
    const std::size_t end = std::min(start + cfg.batch_size, g.num_nodes);
    std::vector<std::size_t> seeds;
    for (std::size_t n = start; n < end; ++n) seeds.push_back(n);
    auto batch = make_batch(g, model, seeds, fanouts,
                            mix_seed(cfg.seed, kEmbedSalt, batch_index++));
    auto reps = model.representations(batch.x, batch.texts, CsrRef::of(batch.sub));
    rep_dim = reps.dim(1);
    out.insert(out.end(), reps.data(), reps.data() + seeds.size() * rep_dim);
  }
  if (rep_dim_out != nullptr) *rep_dim_out = rep_dim;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint snapshot_model(const BigTexModel& model, const std::string& config_json,
                          std::uint32_t epoch) {
  Checkpoint ckpt;
  ckpt.config_json = config_json;
  ckpt.epoch = epoch;
  std::vector<ParamRef<float>> params;
  model.collect_params(params);
  for (auto& p : params) {
    ckpt.tensors.emplace_back(p.path, p.tensor.detach());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic.data(), 4);
  write_u32(out, 1);  // format version
  write_u32(out, ckpt.epoch);
  write_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (const std::size_t d : tensor.shape()) {
      write_u32(out, static_cast<std::uint32_t>(d));
    }
    write_f32_array(out, tensor.data(), tensor.size());
  }
  write_u32(out, static_cast<std::uint32_t>(ckpt.config_json.size()));
  out.write(ckpt.config_json.data(),
            static_cast<std::streamsize>(ckpt.config_json.size()));
  if (!out) throw LoadError("short write to checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read checkpoint " + path);
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kCheckpointMagic) {
    throw LoadError(path + ": not a checkpoint file");
  }
  const std::uint32_t version = read_u32(in, path);
  if (version != 1) {
    throw LoadError(path + ": unsupported checkpoint version " +
                    std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.epoch = read_u32(in, path);
  const std::uint32_t count = read_u32(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw LoadError(path + ": truncated name");
    const std::uint32_t rank = read_u32(in, path);
    if (rank < 1 || rank > 3) throw LoadError(path + ": bad tensor rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(read_u32(in, path));
    auto tensor = Tensor::zeros(shape);
    read_f32_array(in, tensor.data(), tensor.size(), path);
    ckpt.tensors.emplace_back(std::move(name), std::move(tensor));
  }
  const std::uint32_t json_len = read_u32(in, path);
  ckpt.config_json.resize(json_len);
  if (json_len > 0 && !in.read(ckpt.config_json.data(), json_len)) {
    throw LoadError(path + ": truncated config snapshot");
  }
  return ckpt;
}

void restore_into(BigTexModel& model, const Checkpoint& ckpt) {
  std::vector<ParamRef<float>> params;
  model.collect_params(params);
  if (params.size() != ckpt.tensors.size()) {
    throw LoadError("checkpoint restore: " + std::to_string(ckpt.tensors.size()) +
                    " tensors for a model with " + std::to_string(params.size()) +
                    " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, stored] = ckpt.tensors[i];
    if (params[i].path != name) {
      throw LoadError("checkpoint restore: parameter order mismatch at '" + name +
                      "' (expected '" + params[i].path + "')");
    }
    if (params[i].tensor.shape() != stored.shape()) {
      throw LoadError("checkpoint restore: shape mismatch for '" + name + "'");
    }
    params[i].tensor.values() = stored.values();
  }
}

}  // namespace bigtex
