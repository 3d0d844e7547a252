#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "bigtex/graph.hpp"
#include "bigtex/serialize.hpp"

using namespace bigtex;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("bigtex_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

TextAttributedGraph triangle() {
  auto g = make_graph(3, {{0, 1}, {1, 2}, {2, 0}});
  for (std::size_t n = 0; n < 3; ++n) {
    g.labels[n] = 0;
    g.split[n] = Split::kTrain;
  }
  return g;
}

}  // namespace

TEST_CASE("make_graph dedups, symmetrizes, and drops self-loops") {
  auto g = make_graph(3, {{0, 1}, {1, 0}, {0, 1}, {2, 2}});
  CHECK(g.num_edges() == 1);
  CHECK(g.degree(0) == 1);
  CHECK(g.degree(1) == 1);
  CHECK(g.degree(2) == 0);
  CHECK(g.has_edge(0, 1));
  CHECK(g.has_edge(1, 0));
  CHECK(!g.has_edge(0, 2));
}

TEST_CASE("triangle graph has degree two everywhere") {
  auto g = triangle();
  for (std::size_t n = 0; n < 3; ++n) CHECK(g.degree(n) == 2);
  CHECK(g.num_edges() == 3);
}

TEST_CASE("load_graph parses the three-file format") {
  TempDir dir;
  write_file(dir.file("edges.tsv"),
             "# comment line\n0\t1\n1\t0\n1\t2\n");
  write_file(dir.file("nodes.jsonl"),
             R"({"id": 0, "text": "alpha", "label": 0, "split": "train"})" "\n"
             R"({"id": 1, "text": "beta", "label": 1, "split": "val"})" "\n"
             R"({"id": 2, "text": "", "label": -1, "split": "none"})" "\n");
  auto g = load_graph(dir.file("edges.tsv"), dir.file("nodes.jsonl"), "", 3, 4);
  CHECK(g.num_nodes == 3);
  CHECK(g.num_edges() == 2);  // (0,1) listed twice collapses
  CHECK(g.texts[0] == "alpha");
  CHECK(g.labels[2] == -1);
  CHECK(g.split[1] == Split::kVal);
  CHECK(g.feature_dim == 4);  // zero matrix fallback
  for (float f : g.features) CHECK(f == 0.0f);
}

TEST_CASE("load_graph reports line numbers for bad input") {
  TempDir dir;
  write_file(dir.file("nodes.jsonl"),
             R"({"id": 0, "text": "a", "label": 0, "split": "train"})" "\n"
             R"({"id": 1, "text": "b", "label": 0, "split": "train"})" "\n");

  write_file(dir.file("dangling.tsv"), "0\t1\n1\t7\n");
  CHECK_THROWS_WITH_AS(
      load_graph(dir.file("dangling.tsv"), dir.file("nodes.jsonl")),
      doctest::Contains(":2"), LoadError);

  write_file(dir.file("garbled.tsv"), "0\t1\n0\tnope\n");
  CHECK_THROWS_WITH_AS(
      load_graph(dir.file("garbled.tsv"), dir.file("nodes.jsonl")),
      doctest::Contains(":2"), LoadError);

  write_file(dir.file("edges.tsv"), "0\t1\n");
  write_file(dir.file("badlabel.jsonl"),
             R"({"id": 0, "text": "a", "label": 0, "split": "train"})" "\n"
             R"({"id": 1, "text": "b", "label": 9, "split": "train"})" "\n");
  CHECK_THROWS_WITH_AS(
      load_graph(dir.file("edges.tsv"), dir.file("badlabel.jsonl"), "", 3),
      doctest::Contains(":2"), LoadError);

  write_file(dir.file("gap.jsonl"),
             R"({"id": 0, "text": "a", "label": 0, "split": "train"})" "\n"
             R"({"id": 2, "text": "b", "label": 0, "split": "train"})" "\n");
  CHECK_THROWS_AS(load_graph(dir.file("edges.tsv"), dir.file("gap.jsonl")), LoadError);

  write_file(dir.file("unlabeled.jsonl"),
             R"({"id": 0, "text": "a", "label": -1, "split": "train"})" "\n"
             R"({"id": 1, "text": "b", "label": 0, "split": "train"})" "\n");
  CHECK_THROWS_AS(load_graph(dir.file("edges.tsv"), dir.file("unlabeled.jsonl")),
                  LoadError);
}

TEST_CASE("graph round-trips byte-exactly through save and load") {
  TempDir dir;
  auto g = make_graph(4, {{0, 1}, {1, 2}, {2, 3}, {3, 0}});
  g.texts = {"first node", "second, with punctuation!", "", "fourth \"quoted\""};
  g.labels = {0, 1, -1, 2};
  g.split = {Split::kTrain, Split::kVal, Split::kNone, Split::kTest};
  g.feature_dim = 3;
  g.features.assign(12, 0.0f);
  for (std::size_t i = 0; i < 12; ++i) g.features[i] = 0.25f * float(i) - 1.0f;

  save_graph(g, dir.file("e.tsv"), dir.file("n.jsonl"), dir.file("f.bin"));
  auto g2 = load_graph(dir.file("e.tsv"), dir.file("n.jsonl"), dir.file("f.bin"));
  CHECK(g2.csr_offsets == g.csr_offsets);
  CHECK(g2.csr_targets == g.csr_targets);
  CHECK(g2.texts == g.texts);
  CHECK(g2.labels == g.labels);
  CHECK(g2.split == g.split);
  CHECK(g2.features == g.features);

  // Second save produces byte-identical files.
  save_graph(g2, dir.file("e2.tsv"), dir.file("n2.jsonl"), dir.file("f2.bin"));
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir.file("e.tsv")) == slurp(dir.file("e2.tsv")));
  CHECK(slurp(dir.file("n.jsonl")) == slurp(dir.file("n2.jsonl")));
  CHECK(slurp(dir.file("f.bin")) == slurp(dir.file("f2.bin")));
}

TEST_CASE("assign_splits produces the requested proportions") {
  auto g = make_graph(100, {{0, 1}});
  for (std::size_t n = 0; n < 100; ++n) g.labels[n] = int(n % 3);
  assign_splits(g, 0.6, 0.2, 7);
  CHECK(g.nodes_in_split(Split::kTrain).size() == 60);
  CHECK(g.nodes_in_split(Split::kVal).size() == 20);
  CHECK(g.nodes_in_split(Split::kTest).size() == 20);
  CHECK_THROWS_AS(assign_splits(g, 0.8, 0.3, 7), ContractError);
}

TEST_CASE("neighbor_sample covers the full k-hop ball when fanout is large") {
  // path 0-1-2-3-4
  auto g = make_graph(5, {{0, 1}, {1, 2}, {2, 3}, {3, 4}});
  auto sub = neighbor_sample(g, {0}, {10, 10}, 1);
  CHECK(sub.num_nodes() == 3);  // nodes 0, 1, 2
  CHECK(sub.layers[0] == std::vector<std::size_t>{0});
  CHECK(sub.layers[1] == std::vector<std::size_t>{1});
  CHECK(sub.layers[2] == std::vector<std::size_t>{2});
  // induced edges (0,1) and (1,2), re-indexed
  CHECK(sub.degree(0) == 1);
  CHECK(sub.degree(1) == 2);
  CHECK(sub.degree(2) == 1);
}

TEST_CASE("neighbor_sample of an isolated seed is just the seed") {
  auto g = make_graph(3, {{0, 1}});
  auto sub = neighbor_sample(g, {2}, {5}, 1);
  CHECK(sub.num_nodes() == 1);
  CHECK(sub.local_to_global == std::vector<std::size_t>{2});
  CHECK(sub.csr_targets.empty());
}

TEST_CASE("neighbor_sample star graph: fanout bounds and reproducibility") {
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t leaf = 1; leaf <= 10; ++leaf) edges.emplace_back(0, leaf);
  auto g = make_graph(11, edges);

  auto a = neighbor_sample(g, {0}, {3}, 42);
  CHECK(a.num_nodes() == 4);  // center + 3 distinct leaves
  std::set<std::size_t> leaves(a.local_to_global.begin() + 1, a.local_to_global.end());
  CHECK(leaves.size() == 3);
  for (const std::size_t leaf : leaves) CHECK(leaf >= 1);

  auto b = neighbor_sample(g, {0}, {3}, 42);
  CHECK(b.local_to_global == a.local_to_global);
  CHECK(b.csr_targets == a.csr_targets);

  auto c = neighbor_sample(g, {0}, {3}, 43);
  CHECK(c.num_nodes() == 4);  // may be a different sample but same size
}

TEST_CASE("neighbor_sample local-to-global mapping is injective") {
  auto g = make_graph(8, {{0, 1}, {0, 2}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 6},
                          {6, 7}, {7, 0}});
  auto sub = neighbor_sample(g, {0, 3}, {2, 2}, 9);
  std::set<std::size_t> uniq(sub.local_to_global.begin(), sub.local_to_global.end());
  CHECK(uniq.size() == sub.local_to_global.size());
  for (const std::size_t t : sub.csr_targets) CHECK(t < sub.num_nodes());
}

TEST_CASE("neighbor_sample rejects empty or duplicate seeds") {
  auto g = triangle();
  CHECK_THROWS_AS(neighbor_sample(g, {}, {2}, 1), ContractError);
  CHECK_THROWS_AS(neighbor_sample(g, {0, 0}, {2}, 1), ContractError);
  CHECK_THROWS_AS(neighbor_sample(g, {9}, {2}, 1), IndexError);
}

TEST_CASE("link split arithmetic and disjointness") {
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t i = 0; i < 100; ++i) edges.emplace_back(i, (i + 1) % 100);
  auto g = make_graph(100, edges);
  CHECK(g.num_edges() == 100);

  auto split = split_edges_for_linkpred(g, 0.2, 5);
  CHECK(split.test_pos.size() == 20);
  CHECK(split.test_neg.size() == 20);
  CHECK(split.retained.num_edges() == 80);

  for (const auto& [u, v] : split.test_pos) {
    CHECK(!split.retained.has_edge(u, v));  // removed from message passing
    CHECK(g.has_edge(u, v));
  }
  for (const auto& [u, v] : split.test_neg) {
    CHECK(!g.has_edge(u, v));  // true non-edges of the full graph
    CHECK(u != v);
  }
}

TEST_CASE("link split rejects bad fractions and tiny graphs") {
  auto g = triangle();
  CHECK_THROWS_AS(split_edges_for_linkpred(g, 0.0, 1), ContractError);
  CHECK_THROWS_AS(split_edges_for_linkpred(g, 0.5, 1), ContractError);
  CHECK_THROWS_AS(split_edges_for_linkpred(g, 0.2, 1), ContractError);  // < 10 edges
}

TEST_CASE("feature matrix files round-trip") {
  TempDir dir;
  F32Matrix m{2, 3, {1.5f, -2.0f, 0.0f, 3.25f, 4.0f, -0.125f}};
  write_f32_matrix(dir.file("m.bin"), kFeatureMagic, m);
  auto m2 = read_f32_matrix(dir.file("m.bin"), kFeatureMagic);
  CHECK(m2.rows == 2);
  CHECK(m2.cols == 3);
  CHECK(m2.data == m.data);
  CHECK_THROWS_AS(read_f32_matrix(dir.file("m.bin"), kEmbeddingMagic), LoadError);
}
