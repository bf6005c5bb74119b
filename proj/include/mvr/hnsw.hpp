#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace mvr {

struct HnswParams {
  std::size_t m = 16;                 // links per node on upper layers; 2m on layer 0
  std::size_t ef_construction = 200;
  std::size_t ef_search = 64;
  std::uint64_t seed = 42;

  friend bool operator==(const HnswParams&, const HnswParams&) = default;
};

// Hierarchical navigable small-world graph over float vectors, ranked by inner
// product (larger is closer). The vectors are borrowed and must outlive the graph.
class HnswGraph {
 public:
  HnswGraph() = default;
  HnswGraph(std::span<const float> vectors, std::size_t dim, const HnswParams& params);

  // Up to count (similarity, node) pairs, best first.
  std::vector<std::pair<double, std::uint32_t>> search(std::span<const double> query, std::size_t count,
                                                       std::size_t ef) const;
  std::size_t size() const { return levels_.size(); }
  const HnswParams& params() const { return params_; }

 private:
  using Scored = std::pair<double, std::uint32_t>;

  double similarity(std::span<const double> query, std::uint32_t node) const;
  double similarity(std::uint32_t a, std::uint32_t b) const;
  std::vector<Scored> search_layer(std::span<const double> query, std::vector<Scored> entry, std::size_t ef,
                                   std::size_t level) const;
  std::vector<std::uint32_t> select_neighbors(std::vector<Scored> candidates, std::size_t max_links) const;
  void insert(std::uint32_t node, std::size_t level);
  std::vector<std::uint32_t>& links(std::uint32_t node, std::size_t level) { return links_[node][level]; }

  std::span<const float> vectors_;
  std::size_t dim_ = 0;
  HnswParams params_;
  std::vector<std::size_t> levels_;
  std::vector<std::vector<std::vector<std::uint32_t>>> links_;
  std::uint32_t entry_ = 0;
  std::size_t max_level_ = 0;
};

}  // namespace mvr
