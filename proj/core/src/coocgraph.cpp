#include "s2gr/coocgraph.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "s2gr/errors.hpp"
#include "s2gr/io.hpp"

namespace s2gr::graph {

std::int64_t CoocGraph::weight(int i, int j) const {
  if (i > j) std::swap(i, j);
  auto it = std::lower_bound(edges.begin(), edges.end(), Edge{i, j, 0},
                             [](const Edge& a, const Edge& b) { return a.i != b.i ? a.i < b.i : a.j < b.j; });
  return it != edges.end() && it->i == i && it->j == j ? it->w : 0;
}

std::vector<double> CoocGraph::degrees() const {
  std::vector<double> d(static_cast<std::size_t>(num_nodes), 0.0);
  for (const auto& e : edges) {
    d[static_cast<std::size_t>(e.i)] += static_cast<double>(e.w);
    d[static_cast<std::size_t>(e.j)] += static_cast<double>(e.w);
  }
  return d;
}

CoocGraph build_cooc_graph(const std::vector<std::vector<int>>& sequences, int num_items, int window) {
  if (window < 2) throw ConfigError("coocgraph.window must be >= 2, got " + std::to_string(window));
  if (num_items < 0) throw ConfigError("coocgraph: negative catalog size");
  const auto n = static_cast<std::uint64_t>(num_items);
  std::vector<std::uint64_t> keys;
  std::unordered_set<std::uint64_t> seen;
  for (const auto& seq : sequences) {
    seen.clear();
    for (std::size_t p = 0; p < seq.size(); ++p) {
      if (seq[p] < 0 || seq[p] >= num_items) throw IndexError("coocgraph: item id out of range");
      const std::size_t end = std::min(seq.size(), p + static_cast<std::size_t>(window));
      for (std::size_t q = p + 1; q < end; ++q) {
        auto a = static_cast<std::uint64_t>(seq[p]), b = static_cast<std::uint64_t>(seq[q]);
        if (a == b) continue;
        if (a > b) std::swap(a, b);
        seen.insert(a * n + b);
      }
    }
    keys.insert(keys.end(), seen.begin(), seen.end());
  }
  std::sort(keys.begin(), keys.end());
  CoocGraph g;
  g.num_nodes = num_items;
  g.window = window;
  for (std::size_t k = 0; k < keys.size();) {
    std::size_t m = k;
    while (m < keys.size() && keys[m] == keys[k]) ++m;
    g.edges.push_back({static_cast<int>(keys[k] / n), static_cast<int>(keys[k] % n), static_cast<std::int64_t>(m - k)});
    k = m;
  }
  return g;
}

CoocGraph build_cooc_graph(const corpus::InteractionLog& log, int window) {
  return build_cooc_graph(log.sequences(), log.num_items, window);
}

double SparseMatrix::at(int i, int j) const {
  const auto b = col.begin() + row_ptr[static_cast<std::size_t>(i)];
  const auto e = col.begin() + row_ptr[static_cast<std::size_t>(i) + 1];
  auto it = std::lower_bound(b, e, j);
  return it != e && *it == j ? val[static_cast<std::size_t>(it - col.begin())] : 0.0;
}

nx::Tensor<double> SparseMatrix::to_dense() const {
  nx::Tensor<double> out(static_cast<std::size_t>(n), static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int k = row_ptr[static_cast<std::size_t>(i)]; k < row_ptr[static_cast<std::size_t>(i) + 1]; ++k)
      out(static_cast<std::size_t>(i), static_cast<std::size_t>(col[static_cast<std::size_t>(k)])) =
          val[static_cast<std::size_t>(k)];
  return out;
}

nx::Tensor<double> SparseMatrix::multiply(const nx::Tensor<double>& dense) const {
  if (dense.rows() != static_cast<std::size_t>(n))
    throw ShapeError("sparse multiply: " + std::to_string(n) + " columns vs " + dense.shape_str());
  const std::size_t d = dense.cols();
  nx::Tensor<double> out(static_cast<std::size_t>(n), d);
  for (int i = 0; i < n; ++i) {
    double* o = out.data.data() + static_cast<std::size_t>(i) * d;
    for (int k = row_ptr[static_cast<std::size_t>(i)]; k < row_ptr[static_cast<std::size_t>(i) + 1]; ++k) {
      const double w = val[static_cast<std::size_t>(k)];
      const double* x = dense.data.data() + static_cast<std::size_t>(col[static_cast<std::size_t>(k)]) * d;
      for (std::size_t c = 0; c < d; ++c) o[c] += w * x[c];
    }
  }
  return out;
}

SparseMatrix normalize_adjacency(const CoocGraph& g) {
  const auto deg = g.degrees();
  std::vector<std::vector<std::pair<int, double>>> rows(static_cast<std::size_t>(g.num_nodes));
  for (const auto& e : g.edges) {
    const double v = static_cast<double>(e.w) /
                     std::sqrt(deg[static_cast<std::size_t>(e.i)] * deg[static_cast<std::size_t>(e.j)]);
    rows[static_cast<std::size_t>(e.i)].emplace_back(e.j, v);
    rows[static_cast<std::size_t>(e.j)].emplace_back(e.i, v);
  }
  SparseMatrix m;
  m.n = g.num_nodes;
  m.row_ptr.push_back(0);
  for (auto& r : rows) {
    std::sort(r.begin(), r.end());
    for (const auto& [c, v] : r) {
      m.col.push_back(c);
      m.val.push_back(v);
    }
    m.row_ptr.push_back(static_cast<int>(m.col.size()));
  }
  return m;
}

void PropagationConfig::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("coocgraph.alpha must be in (0, 1]");
  if (hops < 0) throw ConfigError("coocgraph.hops must be >= 0");
}

std::vector<nx::Tensor<double>> propagate(const nx::Tensor<double>& x, const SparseMatrix& a_hat,
                                          const PropagationConfig& cfg) {
  cfg.validate();
  std::vector<nx::Tensor<double>> hs{x};
  for (int k = 1; k <= cfg.hops; ++k) {
    nx::Tensor<double> h = a_hat.multiply(hs.back());
    for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] = (1.0 - cfg.alpha) * h.data[i] + cfg.alpha * x.data[i];
    hs.push_back(std::move(h));
  }
  return hs;
}

std::vector<double> fusion_weights(const PropagationConfig& cfg) {
  cfg.validate();
  std::vector<double> beta(static_cast<std::size_t>(cfg.hops) + 1);
  double total = 0;
  for (std::size_t k = 0; k < beta.size(); ++k) {
    beta[k] = cfg.alpha * std::pow(1.0 - cfg.alpha, static_cast<double>(k));
    total += beta[k];
  }
  for (auto& b : beta) b /= total;
  return beta;
}

nx::Tensor<double> fuse(const std::vector<nx::Tensor<double>>& hs, const PropagationConfig& cfg) {
  const auto beta = fusion_weights(cfg);
  if (hs.size() != beta.size())
    throw ShapeError("fuse: expected " + std::to_string(beta.size()) + " matrices, got " + std::to_string(hs.size()));
  nx::Tensor<double> out = nx::Tensor<double>::zeros_like(hs[0]);
  for (std::size_t k = 0; k < hs.size(); ++k) {
    if (!hs[k].same_shape(out)) throw ShapeError("fuse: shape mismatch at hop " + std::to_string(k));
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += beta[k] * hs[k].data[i];
  }
  return out;
}

nx::Tensor<float> align_embeddings(const nx::Tensor<float>& x, const CoocGraph& g, const PropagationConfig& cfg) {
  if (x.rows() != static_cast<std::size_t>(g.num_nodes))
    throw ShapeError("align_embeddings: X has " + std::to_string(x.rows()) + " rows, graph has " +
                     std::to_string(g.num_nodes) + " nodes");
  const auto a_hat = normalize_adjacency(g);
  auto h = fuse(propagate(x.cast<double>(), a_hat, cfg), cfg);
  if (!h.all_finite()) throw NumericalError("align_embeddings produced non-finite values");
  return h.cast<float>();
}

void write_graph(const std::filesystem::path& path, const CoocGraph& g) {
  std::ostringstream ss;
  for (const auto& e : g.edges) ss << e.i << '\t' << e.j << '\t' << e.w << '\n';
  io::write_text(path, ss.str());
}

CoocGraph read_graph(const std::filesystem::path& path, int num_nodes, int window) {
  CoocGraph g;
  g.num_nodes = num_nodes;
  g.window = window;
  std::istringstream in(io::read_text(path));
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty()) continue;
    const auto f = io::split(line, '\t');
    Edge e;
    auto num = [](std::string_view s, auto& out) {
      s = io::trim(s);
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
      return ec == std::errc() && p == s.data() + s.size();
    };
    if (f.size() != 3 || !num(f[0], e.i) || !num(f[1], e.j) || !num(f[2], e.w))
      throw ParseError("malformed graph row", line_no);
    if (e.i >= e.j || e.i < 0 || e.j >= num_nodes || e.w < 0) throw ParseError("invalid graph edge", line_no);
    if (!g.edges.empty() && !(g.edges.back().i < e.i || (g.edges.back().i == e.i && g.edges.back().j < e.j)))
      throw ParseError("graph rows must be sorted by (i, j)", line_no);
    g.edges.push_back(e);
  }
  return g;
}

}  // namespace s2gr::graph
