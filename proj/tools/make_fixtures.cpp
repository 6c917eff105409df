// Writes the bundled datasets to disk in the loader's file formats.

#include <cstdio>
#include <filesystem>
#include <string>

#include <stableflow/stableflow.hpp>

int main(int argc, char** argv) {
  using namespace stableflow;
  namespace fs = std::filesystem;
  std::string root = argc > 1 ? argv[1] : "data";
  auto dump = [&](const Dataset& d, const std::string& name) {
    fs::create_directories(fs::path(root) / name);
    std::string base = (fs::path(root) / name).string() + "/";
    save_dataset(d, base + "features.csv", base + "edges.tsv", base + "labels.txt",
                 base + "splits.json");
    std::printf("%s: %zu nodes, %zu edges, %zu features, %zu classes\n", name.c_str(),
                d.n_nodes(), d.graph.edges.size(), d.n_features(), d.n_classes);
  };
  dump(make_small_fixture(), "small");
  dump(make_cora_scale(), "cora");
  dump(make_citeseer_scale(), "citeseer");
  return 0;
}
