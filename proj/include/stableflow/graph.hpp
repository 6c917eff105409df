#ifndef STABLEFLOW_GRAPH_HPP
#define STABLEFLOW_GRAPH_HPP

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stableflow/tensor.hpp"

namespace stableflow {

struct IngestionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigurationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Edge {
  std::size_t i, j;
  double w;
};

/// Undirected weighted graph without self-loops. The adjacency is kept dense
/// and symmetric with a zero diagonal.
struct Graph {
  std::size_t n_nodes = 0;
  std::vector<Edge> edges;  // unique pairs, i < j
  Tensor adjacency;

  void validate() const {
    if (adjacency.rows() != n_nodes || adjacency.cols() != n_nodes)
      throw ContractError("Graph: adjacency shape " + adjacency.shape_str() +
                          " does not match n_nodes " + std::to_string(n_nodes));
    for (std::size_t i = 0; i < n_nodes; ++i) {
      if (adjacency.at(i, i) != 0.0) throw ContractError("Graph: nonzero diagonal at node " + std::to_string(i));
      for (std::size_t j = i + 1; j < n_nodes; ++j)
        if (adjacency.at(i, j) != adjacency.at(j, i))
          throw ContractError("Graph: asymmetric adjacency at (" + std::to_string(i) + "," +
                              std::to_string(j) + ")");
    }
  }

  std::size_t degree(std::size_t i) const {
    std::size_t d = 0;
    for (std::size_t j = 0; j < n_nodes; ++j)
      if (adjacency.at(i, j) != 0.0) ++d;
    return d;
  }
};

inline Graph make_graph(std::size_t n_nodes, const std::vector<Edge>& raw_edges,
                        std::size_t* dropped_self_loops = nullptr) {
  Graph g;
  g.n_nodes = n_nodes;
  g.adjacency = Tensor(n_nodes, n_nodes);
  std::size_t dropped = 0;
  for (const Edge& e : raw_edges) {
    if (e.i >= n_nodes || e.j >= n_nodes)
      throw IngestionError("edge (" + std::to_string(e.i) + "," + std::to_string(e.j) +
                           ") out of range for " + std::to_string(n_nodes) + " nodes");
    if (e.i == e.j) {
      ++dropped;
      continue;
    }
    // Symmetrize by max of directed pairs; duplicates merge keeping the max.
    double w = std::max({e.w, g.adjacency.at(e.i, e.j)});
    g.adjacency.at(e.i, e.j) = w;
    g.adjacency.at(e.j, e.i) = w;
  }
  for (std::size_t i = 0; i < n_nodes; ++i)
    for (std::size_t j = i + 1; j < n_nodes; ++j)
      if (g.adjacency.at(i, j) != 0.0) g.edges.push_back({i, j, g.adjacency.at(i, j)});
  if (dropped_self_loops) *dropped_self_loops = dropped;
  return g;
}

struct Splits {
  std::vector<std::size_t> train, val, test;
};

struct LoadReport {
  std::size_t self_loops_dropped = 0;
  std::map<int, int> label_remap;  // recorded when class ids were not contiguous
};

/// Graph + node features U(0) + labels + splits. Immutable after load.
struct Dataset {
  Graph graph;
  Tensor features;           // N x d
  std::vector<int> labels;   // -1 for unlabeled (injected) nodes
  std::size_t n_classes = 0;
  Splits splits;
  LoadReport report;

  std::size_t n_nodes() const { return graph.n_nodes; }
  std::size_t n_features() const { return features.cols(); }

  void validate() const {
    graph.validate();
    if (features.rows() != graph.n_nodes)
      throw IngestionError("feature rows " + std::to_string(features.rows()) +
                           " != node count " + std::to_string(graph.n_nodes));
    if (labels.size() != graph.n_nodes)
      throw IngestionError("label count " + std::to_string(labels.size()) + " != node count " +
                           std::to_string(graph.n_nodes));
    std::set<std::size_t> seen;
    auto check = [&](const std::vector<std::size_t>& s, const char* name) {
      for (std::size_t i : s) {
        if (i >= graph.n_nodes) throw IngestionError(std::string(name) + " split index out of range");
        if (!seen.insert(i).second) throw IngestionError("splits are not disjoint at node " + std::to_string(i));
      }
    };
    check(splits.train, "train");
    check(splits.val, "val");
    check(splits.test, "test");
  }
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open file: " + path);
  return in;
}

}  // namespace detail

/// Edge file: `src<TAB>dst[<TAB>weight]`, 0-based ids, '#' comments ignored.
inline std::vector<Edge> parse_edge_file(const std::string& path) {
  auto in = detail::open_or_throw(path);
  std::vector<Edge> edges;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    long long i, j;
    double w = 1.0;  // weight column optional; citation benchmarks are unweighted
    if (!(ss >> i >> j))
      throw IngestionError(path + ":" + std::to_string(lineno) + ": expected `src dst [weight]`");
    ss >> w;
    if (i < 0 || j < 0) throw IngestionError(path + ":" + std::to_string(lineno) + ": negative node id");
    edges.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), w});
  }
  return edges;
}

inline Tensor parse_feature_csv(const std::string& path) {
  auto in = detail::open_or_throw(path);
  std::vector<double> data;
  std::string line;
  std::size_t rows = 0, cols = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = detail::split_fields(line, ',');
    if (cols == 0) cols = fields.size();
    if (fields.size() != cols)
      throw IngestionError(path + ": row " + std::to_string(rows) + " has " +
                           std::to_string(fields.size()) + " values, expected " + std::to_string(cols));
    for (const auto& f : fields) data.push_back(std::stod(f));
    ++rows;
  }
  return Tensor(rows, cols, std::move(data));
}

inline std::vector<int> parse_label_file(const std::string& path) {
  auto in = detail::open_or_throw(path);
  std::vector<int> labels;
  int v;
  while (in >> v) labels.push_back(v);
  return labels;
}

inline Splits parse_split_file(const std::string& path) {
  auto in = detail::open_or_throw(path);
  nlohmann::json j;
  in >> j;
  Splits s;
  for (auto v : j.at("train")) s.train.push_back(v.get<std::size_t>());
  for (auto v : j.at("val")) s.val.push_back(v.get<std::size_t>());
  for (auto v : j.at("test")) s.test.push_back(v.get<std::size_t>());
  return s;
}

inline Dataset load_dataset(const std::string& feature_path, const std::string& edge_path,
                            const std::string& label_path, const std::string& split_path) {
  Dataset d;
  d.features = parse_feature_csv(feature_path);
  d.labels = parse_label_file(label_path);
  if (d.features.rows() != d.labels.size())
    throw IngestionError("feature rows " + std::to_string(d.features.rows()) +
                         " != label count " + std::to_string(d.labels.size()));
  d.graph = make_graph(d.features.rows(), parse_edge_file(edge_path), &d.report.self_loops_dropped);
  d.splits = parse_split_file(split_path);

  // Remap non-contiguous class ids, recording the mapping.
  std::set<int> classes(d.labels.begin(), d.labels.end());
  classes.erase(-1);
  int next = 0;
  bool contiguous = true;
  std::map<int, int> remap;
  for (int c : classes) {
    remap[c] = next;
    if (c != next) contiguous = false;
    ++next;
  }
  if (!contiguous) {
    for (int& l : d.labels)
      if (l != -1) l = remap[l];
    d.report.label_remap = remap;
  }
  d.n_classes = static_cast<std::size_t>(next);
  d.validate();
  return d;
}

inline void save_dataset(const Dataset& d, const std::string& feature_path,
                         const std::string& edge_path, const std::string& label_path,
                         const std::string& split_path) {
  {
    std::ofstream out(feature_path);
    out.precision(17);
    for (std::size_t i = 0; i < d.features.rows(); ++i) {
      for (std::size_t j = 0; j < d.features.cols(); ++j) {
        if (j) out << ',';
        out << d.features.at(i, j);
      }
      out << '\n';
    }
  }
  {
    std::ofstream out(edge_path);
    out.precision(17);
    for (const Edge& e : d.graph.edges) out << e.i << '\t' << e.j << '\t' << e.w << '\n';
  }
  {
    std::ofstream out(label_path);
    for (int l : d.labels) out << l << '\n';
  }
  {
    nlohmann::json j;
    j["train"] = d.splits.train;
    j["val"] = d.splits.val;
    j["test"] = d.splits.test;
    std::ofstream out(split_path);
    out << j.dump(2) << '\n';
  }
}

/// Test indices with the lowest low_q and highest high_q degree quantiles
/// removed. Counts use the nearest-rank rule; degree ties break by ascending
/// node id, so exactly floor(q * M + 0.5) nodes leave each tail.
inline std::vector<std::size_t> degree_filter_eval_set(const Dataset& d, double low_q,
                                                       double high_q) {
  if (low_q < 0.0 || high_q < 0.0 || low_q + high_q >= 1.0)
    throw ContractError("degree_filter_eval_set: need 0 <= low_q, high_q and low_q + high_q < 1");
  const auto& test = d.splits.test;
  const std::size_t m = test.size();
  std::vector<std::size_t> order(test.begin(), test.end());
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    std::size_t da = d.graph.degree(a), db = d.graph.degree(b);
    return da != db ? da < db : a < b;
  });
  std::size_t k_low = static_cast<std::size_t>(low_q * m + 0.5);
  std::size_t k_high = static_cast<std::size_t>(high_q * m + 0.5);
  if (k_low + k_high >= m) throw ConfigurationError("degree_filter_eval_set: filter empties the test set");
  std::vector<std::size_t> kept(order.begin() + k_low, order.end() - k_high);
  std::sort(kept.begin(), kept.end());
  if (kept.empty()) throw ConfigurationError("degree_filter_eval_set: empty result");
  return kept;
}

/// Attack budget from the benchmark tables.
struct InjectionBudget {
  std::size_t max_nodes = 0;
  std::size_t max_edges_per_node = 0;

  void validate() const {
    if (max_nodes == 0 || max_edges_per_node == 0)
      throw ContractError("InjectionBudget: bounds must be strictly positive");
  }
};

struct BudgetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Returns an enlarged dataset with `new_features` rows appended as unlabeled
/// nodes. Injected edges may only touch injected nodes; original features,
/// labels, splits, and original-to-original edges are unchanged.
inline Dataset inject_nodes(const Dataset& d, const Tensor& new_features,
                            const std::vector<Edge>& new_edges, const InjectionBudget& budget) {
  budget.validate();
  const std::size_t n0 = d.n_nodes();
  const std::size_t k = new_features.rows();
  if (k > budget.max_nodes)
    throw BudgetError("inject_nodes: " + std::to_string(k) + " nodes exceeds max_nodes " +
                      std::to_string(budget.max_nodes));
  if (k > 0 && new_features.cols() != d.n_features())
    throw ShapeError("inject_nodes: feature width " + std::to_string(new_features.cols()) +
                     " != dataset width " + std::to_string(d.n_features()));
  std::vector<std::size_t> inj_degree(k, 0);
  for (const Edge& e : new_edges) {
    bool ei = e.i >= n0, ej = e.j >= n0;
    if (!ei && !ej)
      throw BudgetError("inject_nodes: edge (" + std::to_string(e.i) + "," + std::to_string(e.j) +
                        ") connects two original nodes");
    if (e.i >= n0 + k || e.j >= n0 + k) throw BudgetError("inject_nodes: edge references unknown node");
    if (ei) ++inj_degree[e.i - n0];
    if (ej && e.j != e.i) ++inj_degree[e.j - n0];
  }
  for (std::size_t t = 0; t < k; ++t)
    if (inj_degree[t] > budget.max_edges_per_node)
      throw BudgetError("inject_nodes: injected node " + std::to_string(n0 + t) + " degree " +
                        std::to_string(inj_degree[t]) + " exceeds max_edges_per_node " +
                        std::to_string(budget.max_edges_per_node));

  Dataset out;
  out.n_classes = d.n_classes;
  out.splits = d.splits;  // injected nodes never enter train/val (or test)
  out.report = d.report;
  out.features = Tensor(n0 + k, d.n_features());
  std::copy(d.features.data(), d.features.data() + d.features.size(), out.features.data());
  std::copy(new_features.data(), new_features.data() + new_features.size(),
            out.features.data() + d.features.size());
  out.labels = d.labels;
  out.labels.resize(n0 + k, -1);
  std::vector<Edge> all_edges = d.graph.edges;
  all_edges.insert(all_edges.end(), new_edges.begin(), new_edges.end());
  out.graph = make_graph(n0 + k, all_edges);
  out.validate();
  return out;
}

inline std::uint64_t checksum(const Dataset& d) {
  std::uint64_t h = checksum(d.features) * 31 + checksum(d.graph.adjacency);
  for (int l : d.labels) h = h * 1099511628211ull + static_cast<std::uint64_t>(l + 2);
  return h;
}

}  // namespace stableflow

#endif
