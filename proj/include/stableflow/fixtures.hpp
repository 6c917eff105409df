#ifndef STABLEFLOW_FIXTURES_HPP
#define STABLEFLOW_FIXTURES_HPP

#include <numeric>
#include <random>
#include <set>
#include <utility>

#include "stableflow/graph.hpp"

namespace stableflow {

/// 24-node two-community fixture: 4-d Gaussian blobs around opposite class
/// means, a homophilic ring inside each community, two bridge edges.
/// Deterministic; linearly separable.
inline Dataset make_small_fixture() {
  const std::size_t n = 24, half = 12, d = 4;
  Dataset ds;
  ds.n_classes = 2;
  ds.features = Tensor(n, d);
  ds.labels.assign(n, 0);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> noise(0.0, 0.15);
  for (std::size_t i = 0; i < n; ++i) {
    int cls = i < half ? 0 : 1;
    ds.labels[i] = cls;
    for (std::size_t j = 0; j < d; ++j) {
      double mean = (j < d / 2) == (cls == 0) ? 1.0 : -1.0;
      ds.features.at(i, j) = mean + noise(rng);
    }
  }
  std::vector<Edge> edges;
  for (std::size_t b = 0; b < 2; ++b) {
    std::size_t off = b * half;
    for (std::size_t i = 0; i < half; ++i) {
      edges.push_back({off + i, off + (i + 1) % half, 1.0});
      edges.push_back({off + i, off + (i + 3) % half, 1.0});
    }
  }
  edges.push_back({0, 12, 1.0});
  edges.push_back({6, 18, 1.0});
  ds.graph = make_graph(n, edges);
  for (std::size_t i = 0; i < 6; ++i) {
    ds.splits.train.push_back(i);
    ds.splits.train.push_back(half + i);
  }
  for (std::size_t i = 6; i < 9; ++i) {
    ds.splits.val.push_back(i);
    ds.splits.val.push_back(half + i);
  }
  for (std::size_t i = 9; i < half; ++i) {
    ds.splits.test.push_back(i);
    ds.splits.test.push_back(half + i);
  }
  ds.validate();
  return ds;
}

/// Synthetic citation-style benchmark with exact node/edge/feature/class
/// counts: homophilic random edges, sparse class-informative binary features,
/// planetoid-style splits. Fully determined by the seed.
inline Dataset make_synthetic_citation(std::size_t n_nodes, std::size_t n_edges,
                                       std::size_t n_features, std::size_t n_classes,
                                       std::size_t train_per_class, std::size_t n_val,
                                       std::size_t n_test, std::uint64_t seed) {
  Dataset ds;
  ds.n_classes = n_classes;
  std::mt19937_64 rng(seed);

  ds.labels.resize(n_nodes);
  for (std::size_t i = 0; i < n_nodes; ++i) ds.labels[i] = static_cast<int>(i % n_classes);
  std::shuffle(ds.labels.begin(), ds.labels.end(), rng);

  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < n_nodes; ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  // Features: ~20 topic words from the class block + ~10 noise words.
  const std::size_t block = n_features / n_classes;
  ds.features = Tensor(n_nodes, n_features);
  std::uniform_int_distribution<std::size_t> in_block(0, block - 1);
  std::uniform_int_distribution<std::size_t> anywhere(0, n_features - 1);
  for (std::size_t i = 0; i < n_nodes; ++i) {
    std::size_t c = static_cast<std::size_t>(ds.labels[i]);
    for (std::size_t t = 0; t < 20; ++t) ds.features.at(i, c * block + in_block(rng)) = 1.0;
    for (std::size_t t = 0; t < 10; ++t) ds.features.at(i, anywhere(rng)) = 1.0;
  }

  // Edges: mostly intra-class pairs until the exact target count is reached.
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any_node(0, n_nodes - 1);
  while (pairs.size() < n_edges) {
    std::size_t a, b;
    if (coin(rng) < 0.92) {
      const auto& members = by_class[any_node(rng) % n_classes];
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      a = members[pick(rng)];
      b = members[pick(rng)];
    } else {
      a = any_node(rng);
      b = any_node(rng);
    }
    if (a == b) continue;
    pairs.insert({std::min(a, b), std::max(a, b)});
  }
  std::vector<Edge> edges;
  for (const auto& [a, b] : pairs) edges.push_back({a, b, 1.0});
  ds.graph = make_graph(n_nodes, edges);

  // Planetoid-style splits: train_per_class labeled nodes per class, then the
  // next unassigned nodes fill val and test in id order.
  std::vector<bool> taken(n_nodes, false);
  for (std::size_t c = 0; c < n_classes; ++c)
    for (std::size_t t = 0; t < train_per_class && t < by_class[c].size(); ++t) {
      ds.splits.train.push_back(by_class[c][t]);
      taken[by_class[c][t]] = true;
    }
  std::sort(ds.splits.train.begin(), ds.splits.train.end());
  std::size_t cursor = 0;
  auto take = [&](std::vector<std::size_t>& dst, std::size_t count) {
    while (dst.size() < count && cursor < n_nodes) {
      if (!taken[cursor]) {
        dst.push_back(cursor);
        taken[cursor] = true;
      }
      ++cursor;
    }
  };
  take(ds.splits.val, n_val);
  take(ds.splits.test, n_test);
  ds.validate();
  return ds;
}

/// Cora-scale benchmark: 2708 nodes, 5429 edges, 1433 features, 7 classes.
inline Dataset make_cora_scale(std::uint64_t seed = 7) {
  return make_synthetic_citation(2708, 5429, 1433, 7, 20, 500, 1000, seed);
}

/// Citeseer-scale benchmark: 3327 nodes, 4732 edges, 3703 features, 6 classes.
inline Dataset make_citeseer_scale(std::uint64_t seed = 7) {
  return make_synthetic_citation(3327, 4732, 3703, 6, 20, 500, 1000, seed);
}

}  // namespace stableflow

#endif
