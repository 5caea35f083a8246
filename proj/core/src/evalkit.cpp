#include "s2gr/evalkit.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "s2gr/errors.hpp"

namespace s2gr::eval {

int rank_of(const Ranking& ranking, int target) {
  const auto it = std::find(ranking.begin(), ranking.end(), target);
  return it == ranking.end() ? 0 : static_cast<int>(it - ranking.begin()) + 1;
}

namespace {

void check_sizes(std::span<const Ranking> rankings, std::span<const int> targets) {
  if (rankings.size() != targets.size())
    throw ShapeError(fmt::format("{} rankings for {} targets", rankings.size(), targets.size()));
}

template <typename F>
double mean_over(std::span<const Ranking> rankings, std::span<const int> targets, int k, F gain) {
  check_sizes(rankings, targets);
  if (k < 1) throw ConfigError("metric cutoff must be >= 1");
  if (rankings.empty()) return 0;
  double s = 0;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    const int r = rank_of(rankings[i], targets[i]);
    if (r >= 1 && r <= k) s += gain(r);
  }
  return s / static_cast<double>(rankings.size());
}

}  // namespace

double hit_rate(std::span<const Ranking> rankings, std::span<const int> targets, int k) {
  return mean_over(rankings, targets, k, [](int) { return 1.0; });
}

double ndcg(std::span<const Ranking> rankings, std::span<const int> targets, int k) {
  return mean_over(rankings, targets, k, [](int r) { return 1.0 / std::log2(r + 1.0); });
}

double MetricReport::hr_at(int k) const {
  for (std::size_t i = 0; i < cutoffs.size(); ++i)
    if (cutoffs[i] == k) return hr[i];
  throw IndexError(fmt::format("cutoff {} not in report", k));
}

double MetricReport::ndcg_at(int k) const {
  for (std::size_t i = 0; i < cutoffs.size(); ++i)
    if (cutoffs[i] == k) return ndcg[i];
  throw IndexError(fmt::format("cutoff {} not in report", k));
}

MetricReport evaluate(std::span<const Ranking> rankings, std::span<const int> targets, std::span<const int> cutoffs) {
  MetricReport r;
  r.n = static_cast<long>(rankings.size());
  for (int k : cutoffs) {
    r.cutoffs.push_back(k);
    r.hr.push_back(hit_rate(rankings, targets, k));
    r.ndcg.push_back(ndcg(rankings, targets, k));
  }
  return r;
}

std::string Bucket::label() const { return hi < 0 ? fmt::format("[{},inf)", lo) : fmt::format("[{},{})", lo, hi); }

std::vector<Bucket> bucket_by_length(std::span<const Ranking> rankings, std::span<const int> targets,
                                     std::span<const int> lengths, std::span<const int> edges,
                                     std::span<const int> cutoffs) {
  check_sizes(rankings, targets);
  if (lengths.size() != rankings.size()) throw ShapeError("one history length per ranking required");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1]) throw ConfigError("bucket edges must be strictly increasing");
  std::vector<Bucket> out(edges.size() + 1);
  for (std::size_t b = 0; b < out.size(); ++b) {
    out[b].lo = b == 0 ? 0 : edges[b - 1];
    out[b].hi = b < edges.size() ? edges[b] : -1;
  }
  std::vector<std::vector<std::size_t>> members(out.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const auto b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), lengths[i]) - edges.begin());
    members[b].push_back(i);
  }
  for (std::size_t b = 0; b < out.size(); ++b) {
    if (members[b].empty()) continue;
    std::vector<Ranking> r;
    std::vector<int> t;
    for (auto i : members[b]) {
      r.push_back(rankings[i]);
      t.push_back(targets[i]);
    }
    out[b].report = evaluate(r, t, cutoffs);
  }
  return out;
}

std::vector<AblationVariant> standard_variants() {
  std::vector<AblationVariant> v(4);
  v[0].name = "full";
  v[1].name = "w/o CoBa";
  v[1].balance = false;
  v[1].uniformity = false;
  v[1].graph_aligned = false;
  v[2].name = "w/o Reason";
  v[2].no_reason = true;
  v[3].name = "w/o L_Think";
  v[3].no_think_loss = true;
  return v;
}

std::vector<AblationRow> run_ablation(std::span<const AblationVariant> variants,
                                      const std::function<MetricReport(const AblationVariant&)>& runner) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants) rows.push_back({v.name, runner(v)});
  return rows;
}

namespace {

std::vector<std::string> header(std::span<const ReportRow> rows) {
  std::vector<std::string> h{"variant", "n"};
  if (!rows.empty())
    for (int k : rows[0].report.cutoffs) {
      h.push_back(fmt::format("HR@{}", k));
      h.push_back(fmt::format("NDCG@{}", k));
    }
  return h;
}

std::vector<std::string> cells(const ReportRow& row, std::size_t width) {
  std::vector<std::string> c{row.name, std::to_string(row.report.n)};
  for (std::size_t i = 0; i < row.report.cutoffs.size(); ++i) {
    c.push_back(fmt::format("{:.4f}", row.report.hr[i]));
    c.push_back(fmt::format("{:.4f}", row.report.ndcg[i]));
  }
  c.resize(width, "-");
  return c;
}

}  // namespace

std::string format_table(std::span<const ReportRow> rows) {
  const auto h = header(rows);
  std::vector<std::vector<std::string>> grid{h};
  for (const auto& r : rows) grid.push_back(cells(r, h.size()));
  std::vector<std::size_t> w(h.size(), 0);
  for (const auto& line : grid)
    for (std::size_t c = 0; c < line.size(); ++c) w[c] = std::max(w[c], line[c].size());
  std::string out;
  for (std::size_t li = 0; li < grid.size(); ++li) {
    for (std::size_t c = 0; c < grid[li].size(); ++c) {
      if (c == 0)
        out += fmt::format("{:<{}}", grid[li][c], w[c]);
      else
        out += fmt::format("  {:>{}}", grid[li][c], w[c]);
    }
    out += '\n';
    if (li == 0) {
      std::size_t total = 0;
      for (auto x : w) total += x + 2;
      out += std::string(total - 2, '-') + '\n';
    }
  }
  return out;
}

std::string format_tsv(std::span<const ReportRow> rows) {
  const auto h = header(rows);
  std::string out;
  auto line = [&out](const std::vector<std::string>& f) {
    for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "\t" : "") + f[i];
    out += '\n';
  };
  line(h);
  for (const auto& r : rows) {
    std::vector<std::string> f{r.name, std::to_string(r.report.n)};
    for (std::size_t i = 0; i < r.report.cutoffs.size(); ++i) {
      f.push_back(fmt::format("{:.6f}", r.report.hr[i]));
      f.push_back(fmt::format("{:.6f}", r.report.ndcg[i]));
    }
    f.resize(h.size(), "");
    line(f);
  }
  return out;
}

}  // namespace s2gr::eval
