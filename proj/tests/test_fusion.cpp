#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <vector>

#include "bigtex/fusion.hpp"

using namespace bigtex;

namespace {

struct TinySetup {
  FusionStackConfig cfg;
  EncoderConfig enc_cfg;
  Vocabulary vocab;
  TextAttributedGraph graph;
  FusionStackT<double> stack;
  std::vector<TokenSequence> texts;

  static TinySetup make(std::uint64_t seed, Pooling pooling = Pooling::kMean,
                        GnnVariant variant = GnnVariant::kGcn) {
    TinySetup s;
    s.enc_cfg.d_model = 4;
    s.enc_cfg.n_layers = 1;
    s.enc_cfg.n_heads = 1;
    s.enc_cfg.ffn_dim = 4;
    s.enc_cfg.max_len = 4;
    s.enc_cfg.max_positions = 8;
    s.enc_cfg.dropout = 0.0;
    s.cfg.n_units = 1;
    s.cfg.feature_dim = 2;
    s.cfg.hidden_dim = 2;
    s.cfg.gnn_variant = variant;
    s.cfg.pooling = pooling;
    s.cfg.lora_rank = 1;
    s.vocab = build_vocab({"aa bb"}, 1, 100);
    s.graph = make_graph(2, {{0, 1}});
    std::mt19937_64 rng(seed);
    s.stack = FusionStackT<double>::init(s.cfg, s.enc_cfg, s.vocab.size(), rng);
    s.texts = {tokenize("aa bb", s.vocab, 4), tokenize("bb", s.vocab, 4)};
    return s;
  }
};

// Plain-double helpers for the straight-line oracle.
using Vec = std::vector<double>;

Vec matvec(const Vec& v, const TensorD& w) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  Vec y(out, 0.0);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out; ++j) y[j] += v[i] * w.values()[i * out + j];
  return y;
}

Vec row_of(const TensorD& t, std::size_t r) {
  const std::size_t d = t.dim(t.rank() - 1);
  return Vec(t.values().begin() + r * d, t.values().begin() + (r + 1) * d);
}

void softmax_inplace(Vec& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double sum = 0;
  for (double& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

Vec layernorm(const Vec& v) {
  const double d = double(v.size());
  double mean = 0;
  for (double x : v) mean += x;
  mean /= d;
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= d;
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  Vec y(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) y[i] = (v[i] - mean) * inv;
  return y;
}

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(0.7978845608 * (x + 0.044715 * x * x * x)));
}

}  // namespace

TEST_CASE("prompt layout matches the pooling mode") {
  auto s = TinySetup::make(1, Pooling::kMean);
  auto o_prev = TensorD::zeros({2});

  TokenSequence empty;
  auto p_empty = build_prompt(o_prev, empty, s.stack.units[0], s.stack.encoders[0],
                              Pooling::kMean);
  CHECK(p_empty.shape() == Shape{2, 4});  // struct + [SEP]
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(p_empty.at(std::size_t(0), j) == 0.0);  // zero o_prev: zero struct token
  }

  TokenSequence ten;
  ten.ids.assign(10, 5);
  ten.attention_mask.assign(10, 1);
  auto p_cls = build_prompt(o_prev, ten, s.stack.units[0], s.stack.encoders[0],
                            Pooling::kCls);
  CHECK(p_cls.shape() == Shape{13, 4});  // [CLS] + struct + [SEP] + 10 tokens

  auto p_nosp = build_prompt(o_prev, ten, s.stack.units[0], s.stack.encoders[0],
                             Pooling::kCls, true);
  CHECK(p_nosp.shape() == Shape{12, 4});  // [CLS] + [SEP] + 10 tokens
}

TEST_CASE("fusion unit matches a straight-line oracle") {
  auto s = TinySetup::make(7, Pooling::kMean, GnnVariant::kGcn);
  const auto& enc = s.stack.encoders[0];
  const auto& unit = s.stack.units[0];

  auto x = TensorD::from_values({2, 2}, {0.4, -0.3, 0.1, 0.8});
  auto state = s.stack.forward(x, s.texts, CsrRef::of(s.graph));
  REQUIRE(state.outputs.size() == 1);
  const auto& got = state.final_output();

  // Oracle: evaluate prompt construction, one encoder layer, cross-attention,
  // and the GCN update with plain loops.
  const auto& layer = enc.layers[0];
  std::vector<Vec> z_rows;
  std::vector<Vec> o0_rows;
  for (std::size_t node = 0; node < 2; ++node) {
    Vec o0 = matvec(row_of(x, node), s.stack.input_proj);
    o0_rows.push_back(o0);

    // prompt: [struct, SEP, tok...] padded to common length 2
    std::vector<Vec> prompt;
    std::vector<double> mask;
    prompt.push_back(matvec(o0, unit.struct_proj));
    mask.push_back(1);
    prompt.push_back(row_of(enc.tok_emb, Vocabulary::kSep));
    mask.push_back(1);
    const auto& seq = s.texts[node];
    for (std::size_t t = 0; t < 2; ++t) {
      const int id = t < seq.ids.size() ? seq.ids[t] : Vocabulary::kPad;
      prompt.push_back(row_of(enc.tok_emb, std::size_t(id)));
      mask.push_back(t < seq.ids.size() ? 1 : 0);
    }
    const std::size_t p = prompt.size();
    for (std::size_t r = 0; r < p; ++r) {
      const Vec pos = row_of(enc.pos_emb, r);
      for (std::size_t j = 0; j < 4; ++j) prompt[r][j] += pos[j];
    }

    // encoder layer: attention, residual + LN, ffn, residual + LN
    std::vector<Vec> q(p), k(p), v(p);
    for (std::size_t r = 0; r < p; ++r) {
      q[r] = matvec(prompt[r], layer.wq);
      k[r] = matvec(prompt[r], layer.wk);
      v[r] = matvec(prompt[r], layer.wv);
    }
    std::vector<Vec> h1(p);
    for (std::size_t r = 0; r < p; ++r) {
      Vec scores(p);
      for (std::size_t c = 0; c < p; ++c) {
        double dot = 0;
        for (std::size_t j = 0; j < 4; ++j) dot += q[r][j] * k[c][j];
        scores[c] = dot / 2.0 + (mask[c] > 0 ? 0.0 : -1e9);
      }
      softmax_inplace(scores);
      Vec ctx(4, 0.0);
      for (std::size_t c = 0; c < p; ++c)
        for (std::size_t j = 0; j < 4; ++j) ctx[j] += scores[c] * v[c][j];
      Vec attn_out = matvec(ctx, layer.wo);
      Vec sum(4);
      for (std::size_t j = 0; j < 4; ++j) sum[j] = prompt[r][j] + attn_out[j];
      h1[r] = layernorm(sum);
    }
    std::vector<Vec> h2(p);
    for (std::size_t r = 0; r < p; ++r) {
      Vec mid = matvec(h1[r], layer.w1);
      for (double& m : mid) m = gelu_scalar(m);
      Vec ff = matvec(mid, layer.w2);
      Vec sum(4);
      for (std::size_t j = 0; j < 4; ++j) sum[j] = h1[r][j] + ff[j];
      h2[r] = layernorm(sum);
    }

    // cross-attention: query from o0, keys/values from the encoder output
    Vec cq = matvec(o0, unit.w_q);
    Vec scores(p);
    for (std::size_t r = 0; r < p; ++r) {
      const Vec key = matvec(h2[r], unit.w_k);
      double dot = 0;
      for (std::size_t j = 0; j < 4; ++j) dot += cq[j] * key[j];
      scores[r] = dot / 2.0 + (mask[r] > 0 ? 0.0 : -1e9);
    }
    softmax_inplace(scores);
    Vec ctx(4, 0.0);
    for (std::size_t r = 0; r < p; ++r) {
      const Vec val = matvec(h2[r], unit.w_v);
      for (std::size_t j = 0; j < 4; ++j) ctx[j] += scores[r] * val[j];
    }
    z_rows.push_back(matvec(ctx, unit.w_out));
  }

  // gcn over the 2-node graph: both rows aggregate to the average
  for (std::size_t node = 0; node < 2; ++node) {
    Vec agg(2, 0.0);
    for (std::size_t j = 0; j < 2; ++j) agg[j] = 0.5 * (z_rows[0][j] + z_rows[1][j]);
    Vec pre = matvec(agg, unit.gnn.w);
    for (std::size_t j = 0; j < 2; ++j) {
      const double want = std::max(0.0, pre[j]);
      CHECK(got.at(node, j) == doctest::Approx(want).epsilon(1e-6));
    }
  }
}

TEST_CASE("identical nodes on a complete graph produce identical rows") {
  auto s = TinySetup::make(11, Pooling::kCls, GnnVariant::kSage);
  auto x = TensorD::from_values({2, 2}, {0.3, 0.5, 0.3, 0.5});
  std::vector<TokenSequence> same_texts = {tokenize("aa", s.vocab, 4),
                                           tokenize("aa", s.vocab, 4)};
  auto state = s.stack.forward(x, same_texts, CsrRef::of(s.graph));
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(state.final_output().at(std::size_t(0), j) ==
          doctest::Approx(state.final_output().at(std::size_t(1), j)).epsilon(1e-12));
  }
}

TEST_CASE("single visible prompt position gets full cross-attention weight") {
  auto s = TinySetup::make(13, Pooling::kMean);
  auto x = TensorD::from_values({2, 2}, {0.2, -0.1, 0.4, 0.9});
  std::vector<TokenSequence> empty_texts(2);
  AblationFlags flags;
  flags.no_soft_prompt = true;  // prompt collapses to a lone [SEP]
  FusionCaptureT<double> capture;
  auto state = s.stack.forward(x, empty_texts, CsrRef::of(s.graph), flags, nullptr,
                               &capture);
  REQUIRE(capture.cross_attention.size() == 1);
  const auto& probs = capture.cross_attention[0];
  CHECK(probs.shape() == Shape{2, 1, 1});
  CHECK(probs.values()[0] == 1.0);
  CHECK(probs.values()[1] == 1.0);
  for (double v : state.final_output().values()) CHECK(std::isfinite(v));
}

TEST_CASE("cross-attention weights sum to one per node") {
  auto s = TinySetup::make(17, Pooling::kCls);
  auto x = TensorD::from_values({2, 2}, {1.0, -2.0, 0.5, 0.25});
  FusionCaptureT<double> capture;
  s.stack.forward(x, s.texts, CsrRef::of(s.graph), {}, nullptr, &capture);
  for (const auto& probs : capture.cross_attention) {
    const std::size_t p = probs.dim(2);
    for (std::size_t node = 0; node < 2; ++node) {
      double sum = 0;
      for (std::size_t j = 0; j < p; ++j) sum += probs.at(node, 0, j);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("soft prompt opens a gradient path from o_prev through the encoder") {
  auto s = TinySetup::make(19, Pooling::kMean);
  // Remove the direct query path so only the prompt path can carry gradients.
  for (auto& v : s.stack.units[0].w_q.values()) v = 0.0;

  auto padded = pad_batch(s.texts);
  auto run = [&](bool no_soft_prompt) {
    auto o_prev = TensorD::from_values({2, 2}, {0.3, -0.2, 0.8, 0.1});
    o_prev.set_requires_grad(true);
    AblationFlags flags;
    flags.no_soft_prompt = no_soft_prompt;
    TapeD tape;
    TapeD::Scope scope(tape);
    auto out = s.stack.unit_forward(0, o_prev, padded, CsrRef::of(s.graph), flags);
    tape.backward(sum_all(out));
    return o_prev.grad();
  };

  auto with_prompt = run(false);
  double magnitude = 0;
  for (double g : with_prompt) magnitude += std::abs(g);
  CHECK(magnitude > 1e-8);

  auto without_prompt = run(true);
  for (double g : without_prompt) CHECK(g == 0.0);
}

TEST_CASE("zero features and empty texts stay finite") {
  auto s = TinySetup::make(23, Pooling::kCls, GnnVariant::kGat);
  auto x = TensorD::zeros({2, 2});
  std::vector<TokenSequence> empty_texts(2);
  auto state = s.stack.forward(x, empty_texts, CsrRef::of(s.graph));
  for (double v : state.final_output().values()) {
    CHECK(std::isfinite(v));
  }
}

TEST_CASE("stack forward is bit-deterministic for a fixed seed") {
  auto run = [] {
    auto s = TinySetup::make(29, Pooling::kCls, GnnVariant::kSage);
    auto x = TensorD::from_values({2, 2}, {0.7, -0.4, 0.2, 0.9});
    return s.stack.forward(x, s.texts, CsrRef::of(s.graph)).final_output().values();
  };
  CHECK(run() == run());
}

TEST_CASE("lora-adapted forward equals plain forward while deltas are zero") {
  auto s = TinySetup::make(31);
  auto x = TensorD::from_values({2, 2}, {0.4, 0.1, -0.2, 0.6});
  AblationFlags with_lora;
  AblationFlags no_lora;
  no_lora.no_lora = true;
  auto a = s.stack.forward(x, s.texts, CsrRef::of(s.graph), with_lora);
  auto b = s.stack.forward(x, s.texts, CsrRef::of(s.graph), no_lora);
  CHECK(a.final_output().values() == b.final_output().values());
}

TEST_CASE("trainable fusion parameters pass a gradient check") {
  auto s = TinySetup::make(37, Pooling::kCls, GnnVariant::kSage);
  s.stack.set_encoder_trainable(false);  // frozen base, adapters remain trainable
  // Scale up embeddings so attention discriminates between positions and
  // query-path gradients are not vanishingly small, and give the adapters a
  // nonzero state so their gradients are generic.
  for (auto& v : s.stack.encoders[0].tok_emb.values()) v *= 25.0;
  for (auto& v : s.stack.encoders[0].pos_emb.values()) v *= 25.0;
  std::mt19937_64 rng(5);
  for (auto& ad : s.stack.loras[0].q)
    ad.b.values() = TensorD::randn({4, 1}, 0.3, rng).values();
  for (auto& ad : s.stack.loras[0].v)
    ad.b.values() = TensorD::randn({4, 1}, 0.3, rng).values();

  auto x = TensorD::from_values({2, 2}, {0.4, -0.3, 0.1, 0.8});
  auto f = [&]() {
    auto state = s.stack.forward(x, s.texts, CsrRef::of(s.graph));
    return cross_entropy_loss(state.final_output(), std::vector<int>{0, 1});
  };

  std::vector<ParamRef<double>> params;
  s.stack.collect_params("", params);
  std::vector<TensorD> trainable;
  for (auto& p : params) {
    if (p.tensor.requires_grad()) trainable.push_back(p.tensor);
  }
  CHECK(trainable.size() > 8);  // projections, gnn, adapters
  CHECK(grad_check_params<double>(f, trainable, 1e-4) < 1e-5);

  // frozen encoder base never accumulates gradients
  for (auto& p : params) {
    if (!p.tensor.requires_grad()) CHECK(!p.tensor.has_grad());
  }
}
