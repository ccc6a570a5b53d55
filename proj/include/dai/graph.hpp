#pragma once

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dai/linalg.hpp"

namespace dai {

/// Undirected simple graph on nodes 0..n-1.
struct Graph {
  int n = 0;
  std::vector<std::pair<int, int>> edges;  // normalized: i < k, sorted, unique

  /// Validates and normalizes an edge list: no self-loops, indices in
  /// range, duplicates rejected.
  static Graph from_edges(int n, std::vector<std::pair<int, int>> raw) {
    if (n < 1) throw std::invalid_argument("Graph: node count must be >= 1");
    for (auto& [i, k] : raw) {
      if (i == k) throw std::invalid_argument("Graph: self-loop rejected");
      if (i < 0 || k < 0 || i >= n || k >= n)
        throw std::invalid_argument("Graph: node index out of range");
      if (i > k) std::swap(i, k);
    }
    std::sort(raw.begin(), raw.end());
    if (std::adjacent_find(raw.begin(), raw.end()) != raw.end())
      throw std::invalid_argument("Graph: duplicate edge rejected");
    return Graph{n, std::move(raw)};
  }

  bool has_edge(int i, int k) const {
    if (i > k) std::swap(i, k);
    return std::binary_search(edges.begin(), edges.end(), std::make_pair(i, k));
  }
};

/// L = D - A. Integer-valued entries, exact in double arithmetic.
inline MatrixXd laplacian(const Graph& g) {
  MatrixXd lap = MatrixXd::Zero(g.n, g.n);
  for (auto [i, k] : g.edges) {
    lap(i, i) += 1.0;
    lap(k, k) += 1.0;
    lap(i, k) -= 1.0;
    lap(k, i) -= 1.0;
  }
  return lap;
}

namespace detail {
class UnionFind {
 public:
  explicit UnionFind(int n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
  int find(int x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(int a, int b) { parent_[find(a)] = find(b); }

 private:
  std::vector<int> parent_;
};
}  // namespace detail

inline bool is_connected(const Graph& g) {
  if (g.n == 1) return true;
  detail::UnionFind uf(g.n);
  for (auto [i, k] : g.edges) uf.unite(i, k);
  int root = uf.find(0);
  for (int v = 1; v < g.n; ++v)
    if (uf.find(v) != root) return false;
  return true;
}

/// Finite family of communication topologies over one node set, with a
/// global directed-channel index shared by every topology. Channels are
/// the two directions of each union-graph edge; the union edges are
/// ordered lexicographically by (min,max) node id, channel 2j is (i -> k)
/// with i < k and channel 2j+1 is (k -> i). Delays bind to this global
/// index, so it must be stable across runs.
struct TopologySet {
  std::vector<Graph> graphs;
  std::vector<std::pair<int, int>> channels;  // directed (from inspection node i, neighbor k)
  std::vector<std::vector<bool>> membership;  // [topology][channel]

  int n() const { return graphs.empty() ? 0 : graphs.front().n; }
  int num_topologies() const { return static_cast<int>(graphs.size()); }
  int num_channels() const { return static_cast<int>(channels.size()); }

  /// Max edge count over the family (the paper's E-bar).
  int ebar() const {
    int e = 0;
    for (const auto& g : graphs) e = std::max(e, static_cast<int>(g.edges.size()));
    return e;
  }

  static TopologySet build(std::vector<Graph> graphs) {
    if (graphs.empty()) throw std::invalid_argument("TopologySet: empty family");
    const int n = graphs.front().n;
    for (const auto& g : graphs)
      if (g.n != n) throw std::invalid_argument("TopologySet: node counts differ");

    std::set<std::pair<int, int>> union_edges;
    for (const auto& g : graphs) union_edges.insert(g.edges.begin(), g.edges.end());

    TopologySet ts;
    ts.graphs = std::move(graphs);
    for (auto [i, k] : union_edges) {  // std::set iterates in lexicographic order
      ts.channels.emplace_back(i, k);
      ts.channels.emplace_back(k, i);
    }
    ts.membership.resize(ts.graphs.size());
    for (std::size_t l = 0; l < ts.graphs.size(); ++l) {
      ts.membership[l].resize(ts.channels.size());
      for (std::size_t m = 0; m < ts.channels.size(); ++m)
        ts.membership[l][m] = ts.graphs[l].has_edge(ts.channels[m].first, ts.channels[m].second);
    }
    return ts;
  }
};

/// Per-channel matrices T[l][m]: for a channel (i,k) present in topology l,
/// t_ii = 1 and t_ik = -1, everything else zero; absent channels are zero
/// matrices so all topologies share one channel layout.
inline std::vector<std::vector<MatrixXd>> channel_matrices(const TopologySet& ts) {
  const int n = ts.n();
  std::vector<std::vector<MatrixXd>> t(ts.num_topologies());
  for (int l = 0; l < ts.num_topologies(); ++l) {
    t[l].reserve(ts.num_channels());
    int covered = 0;
    for (int m = 0; m < ts.num_channels(); ++m) {
      MatrixXd tm = MatrixXd::Zero(n, n);
      if (ts.membership[l][m]) {
        auto [i, k] = ts.channels[m];
        tm(i, i) = 1.0;
        tm(i, k) = -1.0;
        ++covered;
      }
      t[l].push_back(std::move(tm));
    }
    if (covered != 2 * static_cast<int>(ts.graphs[l].edges.size()))
      throw std::invalid_argument("channel_matrices: channel list does not cover topology " +
                                  std::to_string(l));
  }
  return t;
}

struct TopologyDiagnostics {
  bool pass = false;                  // all topologies connected
  std::vector<bool> connected;        // per topology
  int first_disconnected = -1;        // -1 when none
  int union_edge_count = 0;
  int max_edge_count = 0;             // E-bar
  bool union_matches_max = false;     // union graph has exactly E-bar edges

  std::string summary() const {
    std::ostringstream os;
    os << (pass ? "pass" : "FAIL") << ": " << connected.size() << " topologies";
    if (!pass) os << ", first disconnected index " << first_disconnected;
    os << ", union edges " << union_edge_count << ", max edges " << max_edge_count;
    return os.str();
  }
};

/// Connectivity check for every member of the family (Assumption 2-style
/// requirement). Verdict-carrying; never throws.
inline TopologyDiagnostics validate_topology_set(const TopologySet& ts) {
  TopologyDiagnostics d;
  d.pass = true;
  for (int l = 0; l < ts.num_topologies(); ++l) {
    bool c = is_connected(ts.graphs[l]);
    d.connected.push_back(c);
    if (!c && d.first_disconnected < 0) d.first_disconnected = l;
    d.pass = d.pass && c;
  }
  d.union_edge_count = ts.num_channels() / 2;
  d.max_edge_count = ts.ebar();
  d.union_matches_max = (d.union_edge_count == d.max_edge_count);
  return d;
}

}  // namespace dai
