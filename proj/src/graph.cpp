#include "bigtex/graph.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "bigtex/serialize.hpp"

namespace bigtex {

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kNone: return "none";
  }
  return "none";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  if (name == "none") return Split::kNone;
  throw LoadError("unknown split tag '" + name + "'");
}

bool TextAttributedGraph::has_edge(std::size_t u, std::size_t v) const {
  return std::binary_search(neighbors_begin(u), neighbors_end(u), v);
}

int TextAttributedGraph::num_classes() const {
  int max_label = -1;
  for (const int l : labels) max_label = std::max(max_label, l);
  return max_label + 1;
}

std::vector<std::size_t> TextAttributedGraph::nodes_in_split(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < num_nodes; ++n) {
    if (split[n] == s) out.push_back(n);
  }
  return out;
}

void TextAttributedGraph::validate() const {
  if (csr_offsets.size() != num_nodes + 1 || csr_offsets.front() != 0 ||
      csr_offsets.back() != csr_targets.size()) {
    throw LoadError("graph: CSR offsets are inconsistent");
  }
  for (std::size_t n = 0; n < num_nodes; ++n) {
    if (csr_offsets[n] > csr_offsets[n + 1]) {
      throw LoadError("graph: CSR offsets not nondecreasing at node " +
                      std::to_string(n));
    }
    for (auto it = neighbors_begin(n); it != neighbors_end(n); ++it) {
      if (*it >= num_nodes) {
        throw LoadError("graph: edge target " + std::to_string(*it) + " out of range");
      }
      if (*it == n) {
        throw LoadError("graph: self-loop stored at node " + std::to_string(n));
      }
    }
  }
  if (texts.size() != num_nodes || labels.size() != num_nodes ||
      split.size() != num_nodes) {
    throw LoadError("graph: per-node arrays do not match num_nodes");
  }
  if (features.size() != num_nodes * feature_dim) {
    throw LoadError("graph: feature matrix size mismatch");
  }
  for (std::size_t n = 0; n < num_nodes; ++n) {
    if (split[n] != Split::kNone && labels[n] < 0) {
      throw LoadError("graph: node " + std::to_string(n) +
                      " is in a split but has no label");
    }
  }
}

TextAttributedGraph make_graph(std::size_t num_nodes,
                               std::vector<std::pair<std::size_t, std::size_t>> edges) {
  std::vector<std::vector<std::size_t>> adj(num_nodes);
  for (const auto& [u, v] : edges) {
    if (u >= num_nodes || v >= num_nodes) {
      throw LoadError("edge (" + std::to_string(u) + ", " + std::to_string(v) +
                      ") references a missing node");
    }
    if (u == v) continue;
    adj[u].push_back(v);
    adj[v].push_back(u);
  }
  TextAttributedGraph g;
  g.num_nodes = num_nodes;
  g.csr_offsets.assign(num_nodes + 1, 0);
  for (std::size_t n = 0; n < num_nodes; ++n) {
    auto& nb = adj[n];
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    g.csr_offsets[n + 1] = g.csr_offsets[n] + nb.size();
    g.csr_targets.insert(g.csr_targets.end(), nb.begin(), nb.end());
  }
  g.texts.assign(num_nodes, "");
  g.labels.assign(num_nodes, -1);
  g.split.assign(num_nodes, Split::kNone);
  return g;
}

namespace {

std::vector<std::pair<std::size_t, std::size_t>> read_edge_file(
    const std::string& path, std::size_t num_nodes) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read edge file " + path);
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    long long u, v;
    if (!(ls >> u)) continue;  // blank or comment-only line
    std::string rest;
    if (!(ls >> v) || (ls >> rest)) {
      throw LoadError(path + ":" + std::to_string(line_no) + ": malformed edge line");
    }
    if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= num_nodes ||
        static_cast<std::size_t>(v) >= num_nodes) {
      throw LoadError(path + ":" + std::to_string(line_no) + ": edge (" +
                      std::to_string(u) + ", " + std::to_string(v) +
                      ") references a missing node");
    }
    edges.emplace_back(static_cast<std::size_t>(u), static_cast<std::size_t>(v));
  }
  return edges;
}

}  // namespace

TextAttributedGraph load_graph(const std::string& edge_path,
                               const std::string& node_path,
                               const std::string& feature_path, int expected_classes,
                               std::size_t default_feature_dim) {
  std::ifstream nodes_in(node_path);
  if (!nodes_in) throw LoadError("cannot read node file " + node_path);

  struct NodeRow {
    std::string text;
    int label;
    Split split;
  };
  std::unordered_map<std::size_t, NodeRow> rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t max_id = 0;
  while (std::getline(nodes_in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(node_path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.contains("id") || !j["id"].is_number_integer()) {
      throw LoadError(node_path + ":" + std::to_string(line_no) + ": missing node id");
    }
    const long long raw_id = j["id"].get<long long>();
    if (raw_id < 0) {
      throw LoadError(node_path + ":" + std::to_string(line_no) + ": negative node id");
    }
    const auto id = static_cast<std::size_t>(raw_id);
    if (rows.count(id)) {
      throw LoadError(node_path + ":" + std::to_string(line_no) + ": duplicate node id " +
                      std::to_string(id));
    }
    NodeRow row;
    row.text = j.value("text", std::string{});
    row.label = j.value("label", -1);
    try {
      row.split = split_from_name(j.value("split", std::string{"none"}));
    } catch (const LoadError& e) {
      throw LoadError(node_path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (row.label < -1 ||
        (expected_classes >= 0 && row.label >= expected_classes)) {
      throw LoadError(node_path + ":" + std::to_string(line_no) + ": label " +
                      std::to_string(row.label) + " outside declared class count");
    }
    if (row.split != Split::kNone && row.label < 0) {
      throw LoadError(node_path + ":" + std::to_string(line_no) +
                      ": node in split '" + split_name(row.split) + "' has no label");
    }
    max_id = std::max(max_id, id);
    rows.emplace(id, std::move(row));
  }
  if (rows.empty()) throw LoadError(node_path + ": no nodes");
  if (rows.size() != max_id + 1) {
    throw LoadError(node_path + ": node ids are not contiguous (have " +
                    std::to_string(rows.size()) + " nodes, max id " +
                    std::to_string(max_id) + ")");
  }

  const std::size_t num_nodes = rows.size();
  auto g = make_graph(num_nodes, read_edge_file(edge_path, num_nodes));
  for (auto& [id, row] : rows) {
    g.texts[id] = std::move(row.text);
    g.labels[id] = row.label;
    g.split[id] = row.split;
  }

  if (!feature_path.empty()) {
    auto m = read_f32_matrix(feature_path, kFeatureMagic);
    if (m.rows != num_nodes) {
      throw LoadError(feature_path + ": " + std::to_string(m.rows) +
                      " feature rows for " + std::to_string(num_nodes) + " nodes");
    }
    g.feature_dim = m.cols;
    g.features = std::move(m.data);
  } else {
    g.feature_dim = default_feature_dim;
    g.features.assign(num_nodes * default_feature_dim, 0.0f);
  }
  g.validate();
  return g;
}

void save_graph(const TextAttributedGraph& g, const std::string& edge_path,
                const std::string& node_path, const std::string& feature_path) {
  {
    std::ofstream out(edge_path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + edge_path);
    for (std::size_t u = 0; u < g.num_nodes; ++u) {
      for (auto it = g.neighbors_begin(u); it != g.neighbors_end(u); ++it) {
        if (u < *it) out << u << '\t' << *it << '\n';
      }
    }
  }
  {
    std::ofstream out(node_path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + node_path);
    for (std::size_t n = 0; n < g.num_nodes; ++n) {
      nlohmann::json j;
      j["id"] = n;
      j["text"] = g.texts[n];
      j["label"] = g.labels[n];
      j["split"] = split_name(g.split[n]);
      out << j.dump() << '\n';
    }
  }
  if (!feature_path.empty()) {
    F32Matrix m{g.num_nodes, g.feature_dim, g.features};
    write_f32_matrix(feature_path, kFeatureMagic, m);
  }
}

void assign_splits(TextAttributedGraph& g, double train_frac, double val_frac,
                   std::uint64_t seed) {
  if (train_frac <= 0 || val_frac < 0 || train_frac + val_frac >= 1.0) {
    throw ContractError("assign_splits: fractions must satisfy 0 < train, "
                        "0 <= val, train + val < 1");
  }
  std::vector<std::size_t> order(g.num_nodes);
  for (std::size_t i = 0; i < g.num_nodes; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(train_frac * g.num_nodes);
  const auto n_val = static_cast<std::size_t>(val_frac * g.num_nodes);
  for (std::size_t i = 0; i < g.num_nodes; ++i) {
    const std::size_t n = order[i];
    if (g.labels[n] < 0) {
      g.split[n] = Split::kNone;
    } else if (i < n_train) {
      g.split[n] = Split::kTrain;
    } else if (i < n_train + n_val) {
      g.split[n] = Split::kVal;
    } else {
      g.split[n] = Split::kTest;
    }
  }
}

SampledSubgraph neighbor_sample(const TextAttributedGraph& g,
                                const std::vector<std::size_t>& seeds,
                                const std::vector<std::size_t>& fanouts,
                                std::uint64_t rng_seed) {
  if (seeds.empty()) throw ContractError("neighbor_sample: empty seed set");
  for (const std::size_t s : seeds) {
    if (s >= g.num_nodes) {
      throw IndexError("neighbor_sample: seed " + std::to_string(s) + " out of range");
    }
  }
  std::unordered_set<std::size_t> seen(seeds.begin(), seeds.end());
  if (seen.size() != seeds.size()) {
    throw ContractError("neighbor_sample: duplicate seeds");
  }

  SampledSubgraph sub;
  sub.layers.push_back(seeds);
  sub.local_to_global = seeds;
  std::mt19937_64 rng(rng_seed);
  std::vector<std::size_t> frontier = seeds;
  std::vector<std::size_t> scratch;
  for (const std::size_t fanout : fanouts) {
    std::vector<std::size_t> next;
    for (const std::size_t u : frontier) {
      scratch.assign(g.neighbors_begin(u), g.neighbors_end(u));
      std::size_t take = scratch.size();
      if (fanout < take) {
        // partial Fisher-Yates: the first `fanout` entries become the sample
        for (std::size_t i = 0; i < fanout; ++i) {
          std::uniform_int_distribution<std::size_t> pick(i, scratch.size() - 1);
          std::swap(scratch[i], scratch[pick(rng)]);
        }
        take = fanout;
      }
      for (std::size_t i = 0; i < take; ++i) {
        const std::size_t v = scratch[i];
        if (seen.insert(v).second) {
          next.push_back(v);
          sub.local_to_global.push_back(v);
        }
      }
    }
    sub.layers.push_back(next);
    frontier = std::move(next);
  }

  sub.seeds.resize(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) sub.seeds[i] = i;

  std::unordered_map<std::size_t, std::size_t> to_local;
  to_local.reserve(sub.local_to_global.size());
  for (std::size_t i = 0; i < sub.local_to_global.size(); ++i) {
    to_local.emplace(sub.local_to_global[i], i);
  }
  sub.csr_offsets.assign(sub.num_nodes() + 1, 0);
  for (std::size_t i = 0; i < sub.num_nodes(); ++i) {
    const std::size_t u = sub.local_to_global[i];
    std::vector<std::size_t> locals;
    for (auto it = g.neighbors_begin(u); it != g.neighbors_end(u); ++it) {
      auto hit = to_local.find(*it);
      if (hit != to_local.end()) locals.push_back(hit->second);
    }
    std::sort(locals.begin(), locals.end());
    sub.csr_offsets[i + 1] = sub.csr_offsets[i] + locals.size();
    sub.csr_targets.insert(sub.csr_targets.end(), locals.begin(), locals.end());
  }
  return sub;
}

LinkSplit split_edges_for_linkpred(const TextAttributedGraph& g, double test_fraction,
                                   std::uint64_t rng_seed) {
  if (!(test_fraction > 0.0 && test_fraction < 0.5)) {
    throw ContractError("split_edges_for_linkpred: test_fraction must be in (0, 0.5)");
  }
  if (g.num_edges() < 10) {
    throw ContractError("split_edges_for_linkpred: graph has fewer than 10 edges");
  }
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  edges.reserve(g.num_edges());
  for (std::size_t u = 0; u < g.num_nodes; ++u) {
    for (auto it = g.neighbors_begin(u); it != g.neighbors_end(u); ++it) {
      if (u < *it) edges.emplace_back(u, *it);
    }
  }
  std::mt19937_64 rng(rng_seed);
  std::shuffle(edges.begin(), edges.end(), rng);
  const auto n_test = static_cast<std::size_t>(test_fraction * edges.size());

  LinkSplit split;
  split.test_pos.assign(edges.begin(), edges.begin() + n_test);
  split.retained = make_graph(
      g.num_nodes, {edges.begin() + n_test, edges.end()});
  split.retained.texts = g.texts;
  split.retained.labels = g.labels;
  split.retained.split = g.split;
  split.retained.feature_dim = g.feature_dim;
  split.retained.features = g.features;

  std::set<std::pair<std::size_t, std::size_t>> chosen;
  std::uniform_int_distribution<std::size_t> pick(0, g.num_nodes - 1);
  while (split.test_neg.size() < split.test_pos.size()) {
    std::size_t u = pick(rng), v = pick(rng);
    if (u == v) continue;
    if (u > v) std::swap(u, v);
    if (g.has_edge(u, v)) continue;
    if (!chosen.emplace(u, v).second) continue;
    split.test_neg.emplace_back(u, v);
  }
  return split;
}

}  // namespace bigtex
