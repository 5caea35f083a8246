#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace s2gr::eval {

using Ranking = std::vector<int>;  // item ids, best first

/// 1-based rank of `target` in `ranking`, or 0 when absent.
int rank_of(const Ranking& ranking, int target);

/// Mean of 1[rank <= k]; an absent target counts 0.
double hit_rate(std::span<const Ranking> rankings, std::span<const int> targets, int k);
/// Mean of 1/log2(rank + 1) for rank <= k. A single relevant item makes IDCG@k = 1.
double ndcg(std::span<const Ranking> rankings, std::span<const int> targets, int k);

struct MetricReport {
  std::vector<int> cutoffs;
  std::vector<double> hr;
  std::vector<double> ndcg;
  long n = 0;

  double hr_at(int k) const;
  double ndcg_at(int k) const;
};

MetricReport evaluate(std::span<const Ranking> rankings, std::span<const int> targets, std::span<const int> cutoffs);

struct Bucket {
  int lo = 0;
  int hi = -1;  // exclusive; -1 is unbounded
  MetricReport report;
  std::string label() const;
};

/// Buckets [0, e1), [e1, e2), ..., [e_last, inf) by history length. Edges must
/// be strictly increasing (ConfigError). Empty buckets report n = 0 and no
/// metrics.
std::vector<Bucket> bucket_by_length(std::span<const Ranking> rankings, std::span<const int> targets,
                                     std::span<const int> lengths, std::span<const int> edges,
                                     std::span<const int> cutoffs);

struct AblationVariant {
  std::string name;
  bool balance = true;
  bool uniformity = true;
  bool graph_aligned = true;  // false feeds raw X to the tokenizer
  bool no_reason = false;
  bool no_think_loss = false;
};

/// full, w/o CoBa, w/o Reason, w/o L_Think.
std::vector<AblationVariant> standard_variants();

struct AblationRow {
  std::string name;
  MetricReport report;
};

/// Runs every variant through `runner` in order and collects one row each.
std::vector<AblationRow> run_ablation(std::span<const AblationVariant> variants,
                                      const std::function<MetricReport(const AblationVariant&)>& runner);

struct ReportRow {
  std::string name;
  MetricReport report;
};

/// Aligned plain-text table: name, n, then HR@k and NDCG@k per cutoff.
std::string format_table(std::span<const ReportRow> rows);
/// Same columns as TSV with a header line.
std::string format_tsv(std::span<const ReportRow> rows);

}  // namespace s2gr::eval
