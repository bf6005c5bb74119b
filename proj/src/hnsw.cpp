#include "mvr/hnsw.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <random>
#include <stdexcept>

namespace mvr {

namespace {

struct WorstFirst {
  bool operator()(const std::pair<double, std::uint32_t>& a, const std::pair<double, std::uint32_t>& b) const {
    return a.first > b.first;
  }
};

}  // namespace

HnswGraph::HnswGraph(std::span<const float> vectors, std::size_t dim, const HnswParams& params)
    : vectors_(vectors), dim_(dim), params_(params) {
  if (dim == 0 || vectors.size() % dim != 0) throw std::invalid_argument("hnsw: bad vector buffer");
  if (params.m < 2) throw std::invalid_argument("hnsw: m must be >= 2");
  const std::size_t n = vectors.size() / dim;
  std::mt19937_64 rng(params.seed);
  const double level_mult = 1.0 / std::log(static_cast<double>(params.m));
  levels_.resize(n);
  links_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    levels_[i] = static_cast<std::size_t>(std::floor(-std::log(std::max(u, 1e-300)) * level_mult));
    links_[i].resize(levels_[i] + 1);
  }
  for (std::size_t i = 0; i < n; ++i) insert(static_cast<std::uint32_t>(i), levels_[i]);
}

double HnswGraph::similarity(std::span<const double> query, std::uint32_t node) const {
  const float* v = vectors_.data() + static_cast<std::size_t>(node) * dim_;
  double s = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) s += static_cast<double>(v[i]) * query[i];
  return s;
}

double HnswGraph::similarity(std::uint32_t a, std::uint32_t b) const {
  const float* va = vectors_.data() + static_cast<std::size_t>(a) * dim_;
  const float* vb = vectors_.data() + static_cast<std::size_t>(b) * dim_;
  double s = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) s += static_cast<double>(va[i]) * static_cast<double>(vb[i]);
  return s;
}

std::vector<HnswGraph::Scored> HnswGraph::search_layer(std::span<const double> query, std::vector<Scored> entry,
                                                       std::size_t ef, std::size_t level) const {
  std::vector<char> visited(levels_.size(), 0);
  std::priority_queue<Scored> candidates;
  std::priority_queue<Scored, std::vector<Scored>, WorstFirst> results;
  for (const auto& e : entry) {
    if (visited[e.second]) continue;
    visited[e.second] = 1;
    candidates.push(e);
    results.push(e);
    if (results.size() > ef) results.pop();
  }
  while (!candidates.empty()) {
    const Scored best = candidates.top();
    if (results.size() >= ef && best.first < results.top().first) break;
    candidates.pop();
    for (std::uint32_t nb : links_[best.second][level]) {
      if (visited[nb]) continue;
      visited[nb] = 1;
      const double s = similarity(query, nb);
      if (results.size() < ef || s > results.top().first) {
        candidates.emplace(s, nb);
        results.emplace(s, nb);
        if (results.size() > ef) results.pop();
      }
    }
  }
  std::vector<Scored> out;
  out.reserve(results.size());
  while (!results.empty()) {
    out.push_back(results.top());
    results.pop();
  }
  std::reverse(out.begin(), out.end());
  return out;
}

// Keeps a candidate only if it is closer to the base point than to every
// neighbour already kept, then back-fills with pruned candidates.
std::vector<std::uint32_t> HnswGraph::select_neighbors(std::vector<Scored> candidates,
                                                       std::size_t max_links) const {
  std::sort(candidates.begin(), candidates.end(),
            [](const Scored& a, const Scored& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  std::vector<std::uint32_t> kept;
  std::vector<std::uint32_t> pruned;
  for (const auto& [sim, node] : candidates) {
    if (kept.size() >= max_links) break;
    bool good = true;
    for (std::uint32_t r : kept) {
      if (similarity(node, r) > sim) {
        good = false;
        break;
      }
    }
    (good ? kept : pruned).push_back(node);
  }
  for (std::size_t i = 0; i < pruned.size() && kept.size() < max_links; ++i) kept.push_back(pruned[i]);
  return kept;
}

void HnswGraph::insert(std::uint32_t node, std::size_t level) {
  if (node == 0) {
    entry_ = 0;
    max_level_ = level;
    return;
  }
  const float* raw = vectors_.data() + static_cast<std::size_t>(node) * dim_;
  std::vector<double> query(raw, raw + dim_);

  std::uint32_t ep = entry_;
  double ep_sim = similarity(query, ep);
  for (std::size_t l = max_level_; l > level; --l) {
    for (bool changed = true; changed;) {
      changed = false;
      for (std::uint32_t nb : links_[ep][l]) {
        const double s = similarity(query, nb);
        if (s > ep_sim) {
          ep_sim = s;
          ep = nb;
          changed = true;
        }
      }
    }
  }

  std::vector<Scored> entry{{ep_sim, ep}};
  for (std::size_t l = std::min(level, max_level_) + 1; l-- > 0;) {
    auto found = search_layer(query, entry, params_.ef_construction, l);
    const std::size_t max_links = l == 0 ? 2 * params_.m : params_.m;
    links(node, l) = select_neighbors(found, params_.m);
    for (std::uint32_t nb : links_[node][l]) {
      auto& nb_links = links(nb, l);
      nb_links.push_back(node);
      if (nb_links.size() > max_links) {
        std::vector<Scored> cands;
        cands.reserve(nb_links.size());
        for (std::uint32_t x : nb_links) cands.emplace_back(similarity(nb, x), x);
        nb_links = select_neighbors(std::move(cands), max_links);
      }
    }
    entry = std::move(found);
  }
  if (level > max_level_) {
    max_level_ = level;
    entry_ = node;
  }
}

std::vector<std::pair<double, std::uint32_t>> HnswGraph::search(std::span<const double> query, std::size_t count,
                                                                std::size_t ef) const {
  if (levels_.empty() || count == 0) return {};
  if (query.size() != dim_) throw std::invalid_argument("hnsw: query dimension mismatch");
  std::uint32_t ep = entry_;
  double ep_sim = similarity(query, ep);
  for (std::size_t l = max_level_; l > 0; --l) {
    for (bool changed = true; changed;) {
      changed = false;
      for (std::uint32_t nb : links_[ep][l]) {
        const double s = similarity(query, nb);
        if (s > ep_sim) {
          ep_sim = s;
          ep = nb;
          changed = true;
        }
      }
    }
  }
  auto found = search_layer(query, {{ep_sim, ep}}, std::max(ef, count), 0);
  if (found.size() > count) found.resize(count);
  return found;
}

}  // namespace mvr
