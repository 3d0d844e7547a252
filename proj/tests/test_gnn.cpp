#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "bigtex/gnn.hpp"
#include "bigtex/graph.hpp"
#include "bigtex/tensor.hpp"

using namespace bigtex;

namespace {

GnnLayerParamsT<double> identity_params(GnnVariant v, std::size_t d) {
  std::mt19937_64 rng(0);
  auto p = GnnLayerParamsT<double>::init(v, d, d, 1, rng);
  auto eye = TensorD::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) eye.values()[i * d + i] = 1.0;
  switch (v) {
    case GnnVariant::kGcn:
    case GnnVariant::kGat:
      p.w = eye.clone(true);
      break;
    case GnnVariant::kSage:
      p.w_self = eye.clone(true);
      p.w_neigh = eye.clone(true);
      break;
  }
  return p;
}

TextAttributedGraph random_graph(std::size_t n, double edge_prob,
                                 std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t u = 0; u < n; ++u) {
    for (std::size_t v = u + 1; v < n; ++v) {
      if (unit(rng) < edge_prob) edges.emplace_back(u, v);
    }
  }
  return make_graph(n, edges);
}

// Same graph with every neighbor list independently shuffled.
TextAttributedGraph shuffle_neighbor_order(const TextAttributedGraph& g,
                                           std::mt19937_64& rng) {
  TextAttributedGraph out = g;
  for (std::size_t n = 0; n < g.num_nodes; ++n) {
    std::shuffle(out.csr_targets.begin() + g.csr_offsets[n],
                 out.csr_targets.begin() + g.csr_offsets[n + 1], rng);
  }
  return out;
}

}  // namespace

TEST_CASE("gcn on a path graph matches the hand-derived normalization") {
  auto g = make_graph(3, {{0, 1}, {1, 2}});
  auto p = identity_params(GnnVariant::kGcn, 3);
  auto h = TensorD::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto out = gnn_layer(h, CsrRef::of(g), p);
  const double s6 = 1.0 / std::sqrt(6.0);
  CHECK(out.at(1, std::size_t(0)) == doctest::Approx(s6).epsilon(1e-12));
  CHECK(out.at(1, std::size_t(1)) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(out.at(1, std::size_t(2)) == doctest::Approx(s6).epsilon(1e-12));
  // end node: self 1/2, neighbor 1/sqrt(6)
  CHECK(out.at(0, std::size_t(0)) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(out.at(0, std::size_t(1)) == doctest::Approx(s6).epsilon(1e-12));
}

TEST_CASE("sage with an isolated node uses a zero neighbor mean") {
  auto g = make_graph(1, {});
  auto p = identity_params(GnnVariant::kSage, 2);
  auto h = TensorD::from_values({1, 2}, {3.0, -4.0});
  auto out = gnn_layer(h, CsrRef::of(g), p);
  // relu(h * I + 0 * I) = relu(h)
  CHECK(out.at(0, std::size_t(0)) == 3.0);
  CHECK(out.at(0, std::size_t(1)) == 0.0);
}

TEST_CASE("two connected nodes with identical features map identically") {
  auto g = make_graph(2, {{0, 1}});
  std::mt19937_64 rng(1);
  for (auto variant : {GnnVariant::kGcn, GnnVariant::kSage, GnnVariant::kGat}) {
    auto p = GnnLayerParamsT<double>::init(variant, 4, 4, 2, rng);
    auto row = TensorD::randn({4}, 1.0, rng);
    auto h = TensorD::zeros({2, 4});
    std::copy(row.values().begin(), row.values().end(), h.data());
    std::copy(row.values().begin(), row.values().end(), h.data() + 4);
    auto out = gnn_layer(h, CsrRef::of(g), p);
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(out.at(0, j) == doctest::Approx(out.at(1, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("aggregation is invariant to neighbor order") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto g = random_graph(12, 0.3, rng);
    auto shuffled = shuffle_neighbor_order(g, rng);
    auto h = TensorD::randn({12, 6}, 1.0, rng);
    for (auto variant : {GnnVariant::kGcn, GnnVariant::kSage, GnnVariant::kGat}) {
      auto p = GnnLayerParamsT<double>::init(variant, 6, 6, 2, rng);
      auto a = gnn_layer(h, CsrRef::of(g), p);
      auto b = gnn_layer(h, CsrRef::of(shuffled), p);
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(std::abs(a.values()[i] - b.values()[i]) <= 1e-6);
      }
    }
  }
}

TEST_CASE("gat attention rows sum to one over each neighborhood") {
  std::mt19937_64 rng(3);
  auto g = random_graph(10, 0.25, rng);
  auto p = GnnLayerParamsT<double>::init(GnnVariant::kGat, 5, 6, 2, rng);
  auto h = TensorD::randn({10, 5}, 1.0, rng);
  std::vector<TensorD> attn;
  gnn_layer(h, CsrRef::of(g), p, &attn);
  REQUIRE(attn.size() == 2);
  for (const auto& alpha : attn) {
    for (std::size_t i = 0; i < 10; ++i) {
      double row_sum = 0;
      for (std::size_t j = 0; j < 10; ++j) {
        const double a = alpha.at(i, j);
        row_sum += a;
        if (j != i && !g.has_edge(i, j)) CHECK(a == 0.0);  // exact, masked out
      }
      CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("k layers propagate information exactly k hops") {
  // path 0-1-2-3: two layers must not let node 3 influence node 0
  auto g = make_graph(4, {{0, 1}, {1, 2}, {2, 3}});
  std::mt19937_64 rng(4);
  for (auto variant : {GnnVariant::kGcn, GnnVariant::kSage, GnnVariant::kGat}) {
    auto p1 = GnnLayerParamsT<double>::init(variant, 3, 3, 1, rng);
    auto p2 = GnnLayerParamsT<double>::init(variant, 3, 3, 1, rng);
    auto h = TensorD::randn({4, 3}, 1.0, rng);
    auto run = [&](const TensorD& features) {
      return gnn_layer(gnn_layer(features, CsrRef::of(g), p1), CsrRef::of(g), p2);
    };
    auto base = run(h);

    auto perturbed = h.clone();
    for (std::size_t j = 0; j < 3; ++j) perturbed.at(3, j) += 10.0;
    auto moved = run(perturbed);

    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(moved.at(0, j) == base.at(0, j));  // exactly unchanged at distance 3
    }
    bool changed = false;
    for (std::size_t j = 0; j < 3; ++j) {
      changed = changed || moved.at(2, j) != base.at(2, j);
    }
    CHECK(changed);  // distance 1 from the perturbation does move
  }
}

TEST_CASE("all variants pass gradient checks") {
  std::mt19937_64 rng(5);
  auto g = random_graph(6, 0.4, rng);
  for (auto variant : {GnnVariant::kGcn, GnnVariant::kSage, GnnVariant::kGat}) {
    auto p = GnnLayerParamsT<double>::init(variant, 4, 4, 2, rng);
    auto h = TensorD::randn({6, 4}, 1.0, rng);
    h.set_requires_grad(true);
    std::vector<ParamRef<double>> params;
    p.collect_params("gnn.", params);
    std::vector<TensorD> tensors{h};
    for (auto& pr : params) tensors.push_back(pr.tensor);
    auto f = [&]() {
      auto out = gnn_layer(h, CsrRef::of(g), p);
      return sum_all(mul(out, out));
    };
    CHECK(grad_check_params<double>(f, tensors, 1e-5) < 1e-5);
  }
}

TEST_CASE("gnn_layer validates feature dimensions") {
  auto g = make_graph(3, {{0, 1}});
  std::mt19937_64 rng(6);
  auto p = GnnLayerParamsT<double>::init(GnnVariant::kSage, 4, 4, 1, rng);
  CHECK_THROWS_AS(gnn_layer(TensorD::zeros({2, 4}), CsrRef::of(g), p), ContractError);
  CHECK_THROWS_AS(gnn_layer(TensorD::zeros({3, 5}), CsrRef::of(g), p), ContractError);
  CHECK_THROWS_AS(
      GnnLayerParamsT<double>::init(GnnVariant::kGat, 4, 5, 2, rng), ConfigError);
}
