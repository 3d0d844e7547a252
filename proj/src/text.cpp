#include "bigtex/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace bigtex {

namespace {

const char* kSpecialNames[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

Vocabulary with_specials() {
  Vocabulary v;
  for (int i = 0; i < Vocabulary::kNumSpecials; ++i) {
    v.id_to_token.emplace_back(kSpecialNames[i]);
    v.token_to_id.emplace(kSpecialNames[i], i);
  }
  return v;
}

}  // namespace

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  for (const char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!word.empty()) {
      out.push_back(std::move(word));
      word.clear();
    }
  }
  if (!word.empty()) out.push_back(std::move(word));
  return out;
}

Vocabulary build_vocab(const std::vector<std::string>& texts, std::size_t min_freq,
                       std::size_t max_size) {
  if (max_size < static_cast<std::size_t>(Vocabulary::kNumSpecials)) {
    throw ContractError("build_vocab: max_size must cover the 5 special tokens");
  }
  std::unordered_map<std::string, std::size_t> freq;
  for (const auto& text : texts) {
    for (auto& word : split_words(text)) ++freq[word];
  }
  if (freq.empty()) throw ContractError("build_vocab: empty corpus");

  std::vector<std::pair<std::string, std::size_t>> entries(freq.begin(), freq.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab = with_specials();
  for (const auto& [word, count] : entries) {
    if (count < min_freq) break;
    if (vocab.id_to_token.size() >= max_size) break;
    vocab.token_to_id.emplace(word, vocab.size());
    vocab.id_to_token.push_back(word);
  }
  return vocab;
}

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                       std::size_t max_len) {
  TokenSequence seq;
  for (const auto& word : split_words(text)) {
    if (seq.ids.size() >= max_len) break;
    seq.ids.push_back(vocab.id_of(word));
    seq.attention_mask.push_back(1);
  }
  return seq;
}

std::vector<TokenSequence> pad_batch(std::vector<TokenSequence> seqs) {
  std::size_t max_len = 0;
  for (const auto& s : seqs) max_len = std::max(max_len, s.length());
  for (auto& s : seqs) {
    while (s.length() < max_len) {
      s.ids.push_back(Vocabulary::kPad);
      s.attention_mask.push_back(0);
    }
  }
  return seqs;
}

std::string Vocabulary::to_json() const {
  nlohmann::json j;
  j["tokens"] = id_to_token;
  return j.dump();
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  Vocabulary v;
  v.id_to_token = j.at("tokens").get<std::vector<std::string>>();
  for (int i = 0; i < kNumSpecials; ++i) {
    if (static_cast<std::size_t>(i) >= v.id_to_token.size() ||
        v.id_to_token[i] != kSpecialNames[i]) {
      throw LoadError("vocabulary: special token table is corrupt");
    }
  }
  for (std::size_t i = 0; i < v.id_to_token.size(); ++i) {
    v.token_to_id.emplace(v.id_to_token[i], static_cast<int>(i));
  }
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("vocabulary: cannot write " + path);
  out << to_json();
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("vocabulary: cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

namespace {

struct MlmBatch {
  std::vector<TokenSequence> corrupted;
  std::vector<std::size_t> positions;  // flat (row * L + col) of selected tokens
  std::vector<int> targets;
};

// Selects maskable positions with prob mask_prob and applies the
// 80/10/10 corruption recipe. Retries selection when nothing was drawn.
MlmBatch corrupt_batch(const Vocabulary& vocab, std::vector<TokenSequence> padded,
                       float mask_prob, std::mt19937_64& rng) {
  if (!(mask_prob > 0.0f && mask_prob < 1.0f)) {
    throw ContractError("mlm: mask_prob must be in (0, 1)");
  }
  const std::size_t l = padded.empty() ? 0 : padded[0].length();
  std::vector<std::size_t> maskable;
  for (std::size_t r = 0; r < padded.size(); ++r) {
    for (std::size_t c = 0; c < l; ++c) {
      if (padded[r].ids[c] >= Vocabulary::kNumSpecials) maskable.push_back(r * l + c);
    }
  }
  if (maskable.empty()) {
    throw ContractError("mlm: batch contains no maskable (non-special) tokens");
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  MlmBatch out;
  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts && out.positions.empty(); ++attempt) {
    for (const std::size_t pos : maskable) {
      if (unit(rng) < mask_prob) out.positions.push_back(pos);
    }
  }
  if (out.positions.empty()) {
    throw ContractError("mlm: no position selected after 100 attempts; "
                        "raise mask_prob");
  }
  const int vocab_size = vocab.size();
  std::uniform_int_distribution<int> random_token(Vocabulary::kNumSpecials,
                                                  vocab_size - 1);
  for (const std::size_t pos : out.positions) {
    auto& id = padded[pos / l].ids[pos % l];
    out.targets.push_back(id);
    const double u = unit(rng);
    if (u < 0.8) {
      id = Vocabulary::kMask;
    } else if (u < 0.9) {
      id = random_token(rng);
    }  // else keep the original token
  }
  out.corrupted = std::move(padded);
  return out;
}

Tensor mlm_logits(const MiniEncoder& encoder, const MlmBatch& batch,
                  std::mt19937_64* dropout_rng) {
  const std::size_t b = batch.corrupted.size();
  const std::size_t l = batch.corrupted[0].length();
  auto x = encoder.embed_ids(batch.corrupted);
  auto mask = mask_tensor<float>(batch.corrupted);
  auto hidden = encoder.forward(x, mask, nullptr, dropout_rng);
  auto flat = reshape(hidden, {b * l, encoder.cfg.d_model});
  auto rows = take_rows(flat, batch.positions);
  return matmul(rows, transpose_last(encoder.tok_emb));
}

}  // namespace

MlmStepResult mlm_pretrain_step(MiniEncoder& encoder, const Vocabulary& vocab,
                                const std::vector<TokenSequence>& batch,
                                float mask_prob, std::mt19937_64& rng, Adam& opt) {
  auto prepared = corrupt_batch(vocab, pad_batch(batch), mask_prob, rng);
  Tape tape;
  Tape::Scope scope(tape);
  auto loss = cross_entropy_loss(mlm_logits(encoder, prepared, &rng), prepared.targets);
  tape.backward(loss);
  opt.step();
  opt.zero_grad();
  return {loss.item(), prepared.positions.size()};
}

float mlm_eval_loss(const MiniEncoder& encoder, const Vocabulary& vocab,
                    const std::vector<TokenSequence>& batch, float mask_prob,
                    std::mt19937_64& rng) {
  auto prepared = corrupt_batch(vocab, pad_batch(batch), mask_prob, rng);
  auto loss = cross_entropy_loss(mlm_logits(encoder, prepared, nullptr),
                                 prepared.targets);
  return loss.item();
}

}  // namespace bigtex
