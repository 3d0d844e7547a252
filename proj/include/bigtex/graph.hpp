#pragma once

// Text-attributed graphs: undirected CSR adjacency, per-node text, labels,
// and split tags, plus neighbor-sampled mini-batch subgraphs and edge splits
// for link prediction. Graphs are immutable after load and safe to share
// across readers; samplers carry private RNG state.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bigtex/errors.hpp"

namespace bigtex {

enum class Split : std::uint8_t { kTrain, kVal, kTest, kNone };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct TextAttributedGraph {
  std::size_t num_nodes = 0;
  std::vector<std::size_t> csr_offsets;  // num_nodes + 1 entries
  std::vector<std::size_t> csr_targets;  // symmetric, sorted, no self-loops
  std::vector<std::string> texts;
  std::vector<int> labels;  // -1 for unlabeled
  std::vector<Split> split;
  std::size_t feature_dim = 0;
  std::vector<float> features;  // num_nodes x feature_dim, row-major

  std::size_t degree(std::size_t n) const {
    return csr_offsets[n + 1] - csr_offsets[n];
  }
  const std::size_t* neighbors_begin(std::size_t n) const {
    return csr_targets.data() + csr_offsets[n];
  }
  const std::size_t* neighbors_end(std::size_t n) const {
    return csr_targets.data() + csr_offsets[n + 1];
  }
  bool has_edge(std::size_t u, std::size_t v) const;

  /// Undirected edge count (each edge stored twice in csr_targets).
  std::size_t num_edges() const { return csr_targets.size() / 2; }

  int num_classes() const;
  std::vector<std::size_t> nodes_in_split(Split s) const;

  /// Checks the CSR and label/split invariants; throws LoadError on damage.
  void validate() const;
};

/// Builds a canonical graph from an undirected edge list: deduplicates,
/// drops self-loops, symmetrizes, sorts neighbor lists.
TextAttributedGraph make_graph(std::size_t num_nodes,
                               std::vector<std::pair<std::size_t, std::size_t>> edges);

/// Loads the three-file external format. feature_path may be empty, in which
/// case features default to a zero matrix of default_feature_dim columns.
/// When expected_classes >= 0, labels outside [−1, expected_classes) are
/// load errors.
TextAttributedGraph load_graph(const std::string& edge_path,
                               const std::string& node_path,
                               const std::string& feature_path = "",
                               int expected_classes = -1,
                               std::size_t default_feature_dim = 0);

/// Writes the same three-file format back out in canonical order.
void save_graph(const TextAttributedGraph& g, const std::string& edge_path,
                const std::string& node_path, const std::string& feature_path);

/// Overwrites split tags with a seeded shuffle in the given proportions.
void assign_splits(TextAttributedGraph& g, double train_frac, double val_frac,
                   std::uint64_t seed);

struct SampledSubgraph {
  std::vector<std::size_t> seeds;                // local ids, always 0..S-1
  std::vector<std::vector<std::size_t>> layers;  // global ids per hop; layer 0 = seeds
  std::vector<std::size_t> local_to_global;
  std::vector<std::size_t> csr_offsets;  // induced adjacency, re-indexed
  std::vector<std::size_t> csr_targets;

  std::size_t num_nodes() const { return local_to_global.size(); }
  std::size_t degree(std::size_t n) const {
    return csr_offsets[n + 1] - csr_offsets[n];
  }
};

/// Layered uniform neighbor sampling without replacement: per hop h, at most
/// fanouts[h] neighbors per frontier node. Deterministic for a fixed seed.
/// The local adjacency is the subgraph induced on the sampled node set.
SampledSubgraph neighbor_sample(const TextAttributedGraph& g,
                                const std::vector<std::size_t>& seeds,
                                const std::vector<std::size_t>& fanouts,
                                std::uint64_t rng_seed);

struct LinkSplit {
  TextAttributedGraph retained;  // message-passing graph, test edges removed
  std::vector<std::pair<std::size_t, std::size_t>> test_pos;
  std::vector<std::pair<std::size_t, std::size_t>> test_neg;
};

/// Removes a seeded test_fraction of edges and samples an equal number of
/// uniform non-edges. Connectivity of the retained graph is not guaranteed.
LinkSplit split_edges_for_linkpred(const TextAttributedGraph& g, double test_fraction,
                                   std::uint64_t rng_seed);

}  // namespace bigtex
