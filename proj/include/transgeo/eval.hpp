#pragma once

// Retrieval ranking and metrics: R@k, R@1%, hit rate, meter-level accuracy.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "transgeo/dataset.hpp"
#include "transgeo/tensor.hpp"

namespace transgeo {

struct RetrievalResult {
  std::size_t n_refs = 0;
  std::vector<std::vector<std::size_t>> top;  // per query, best K reference rows
  std::vector<std::size_t> gt_rank;           // per query, 1-based rank of its ground truth
};

/// Exact cosine ranking of every reference for every query. Rows are assumed unit-norm, so
/// the dot product is the cosine. Ties go to the lower reference row; the caller keeps
/// reference rows in ascending id order. gt[q] is the ground-truth row for query q
/// (defaults to q).
template <class T>
RetrievalResult rank_references(const Tensor<T>& queries, const Tensor<T>& refs, std::size_t K,
                                std::vector<std::size_t> gt = {}) {
  if (queries.rank() != 2 || refs.rank() != 2 || queries.dim(1) != refs.dim(1)) {
    throw std::invalid_argument("rank_references embedding width mismatch");
  }
  const std::size_t Q = queries.dim(0), R = refs.dim(0), E = queries.dim(1);
  if (gt.empty()) {
    gt.resize(Q);
    std::iota(gt.begin(), gt.end(), std::size_t{0});
  }
  if (gt.size() != Q) throw std::invalid_argument("ground-truth list size mismatch");
  RetrievalResult out;
  out.n_refs = R;
  K = std::min(K, R);
  const auto& qd = queries.storage();
  const auto& rd = refs.storage();
  std::vector<double> sim(R);
  std::vector<std::size_t> order(R);
  for (std::size_t q = 0; q < Q; ++q) {
    for (std::size_t r = 0; r < R; ++r) {
      double s = 0;
      for (std::size_t e = 0; e < E; ++e) s += double(qd[q * E + e]) * double(rd[r * E + e]);
      sim[r] = s;
    }
    auto better = [&](std::size_t a, std::size_t b) { return sim[a] > sim[b] || (sim[a] == sim[b] && a < b); };
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(K), order.end(), better);
    out.top.emplace_back(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(K));
    if (gt[q] >= R) throw std::invalid_argument("ground-truth row out of range");
    std::size_t rank = 1;
    for (std::size_t r = 0; r < R; ++r) rank += better(r, gt[q]) ? 1 : 0;
    out.gt_rank.push_back(rank);
  }
  return out;
}

inline double recall_at_k(const RetrievalResult& res, std::size_t k) {
  if (k < 1) throw std::invalid_argument("recall k must be >= 1");
  if (res.gt_rank.empty()) return 0.0;
  const auto hits = std::count_if(res.gt_rank.begin(), res.gt_rank.end(), [&](std::size_t r) { return r <= k; });
  return 100.0 * double(hits) / double(res.gt_rank.size());
}

/// k for R@1%: max(1, ceil(R / 100)).
inline std::size_t one_percent_k(std::size_t n_refs) { return std::max<std::size_t>(1, (n_refs + 99) / 100); }

inline double recall_at_1pct(const RetrievalResult& res) { return recall_at_k(res, one_percent_k(res.n_refs)); }

/// Which dataset records the query and reference rows came from.
struct EvalRows {
  std::vector<std::size_t> query_records;
  std::vector<std::size_t> ref_records;
};

/// Percentage of queries whose top-1 tile is the ground truth or one of its declared
/// neighbors (tiles covering the query).
inline double hit_rate(const RetrievalResult& res, const DatasetIndex& index, const EvalRows& rows) {
  if (rows.query_records.size() != res.top.size()) throw std::invalid_argument("query rows do not match result");
  if (res.top.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < res.top.size(); ++q) {
    if (res.top[q].empty()) throw std::invalid_argument("empty ranking");
    const auto& query = index.records.at(rows.query_records[q]);
    const auto& pred = index.records.at(rows.ref_records.at(res.top[q][0]));
    const bool hit = pred.id == query.id ||
                     std::find(query.neighbors.begin(), query.neighbors.end(), pred.id) != query.neighbors.end();
    hits += hit ? 1 : 0;
  }
  return 100.0 * double(hits) / double(res.top.size());
}

/// Top-1 tile center versus true query location, in meters.
inline std::vector<double> localization_errors(const RetrievalResult& res, const DatasetIndex& index,
                                               const EvalRows& rows) {
  std::vector<double> out;
  for (std::size_t q = 0; q < res.top.size(); ++q) {
    const auto& query = index.records.at(rows.query_records.at(q));
    const auto& pred = index.records.at(rows.ref_records.at(res.top[q].at(0)));
    out.push_back(geodesic_m(pred.tile.center, query.query));
  }
  return out;
}

/// Percentage of errors strictly below each threshold.
inline std::vector<double> meter_curve(const std::vector<double>& errors_m, const std::vector<double>& thresholds) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) throw std::invalid_argument("thresholds must ascend");
  std::vector<double> out;
  for (double tau : thresholds) {
    const auto n = std::count_if(errors_m.begin(), errors_m.end(), [&](double e) { return e < tau; });
    out.push_back(errors_m.empty() ? 0.0 : 100.0 * double(n) / double(errors_m.size()));
  }
  return out;
}

inline std::vector<double> meter_curve(const RetrievalResult& res, const DatasetIndex& index, const EvalRows& rows,
                                       const std::vector<double>& thresholds) {
  return meter_curve(localization_errors(res, index, rows), thresholds);
}

struct MetricTable {
  double r1 = 0, r5 = 0, r10 = 0, r1pct = 0, hit = 0;
};

inline MetricTable summarize(const RetrievalResult& res, const DatasetIndex& index, const EvalRows& rows) {
  return {recall_at_k(res, 1), recall_at_k(res, 5), recall_at_k(res, 10), recall_at_1pct(res),
          hit_rate(res, index, rows)};
}

inline std::string metrics_csv(const MetricTable& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "metric,value\nR@1,%.4f\nR@5,%.4f\nR@10,%.4f\nR@1%%,%.4f\nhit_rate,%.4f\n", m.r1,
                m.r5, m.r10, m.r1pct, m.hit);
  return buf;
}

inline std::string meter_curve_csv(const std::vector<double>& thresholds, const std::vector<double>& acc) {
  std::string out = "threshold_m,accuracy\n";
  char buf[64];
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%g,%.4f\n", thresholds[i], acc.at(i));
    out += buf;
  }
  return out;
}

}  // namespace transgeo
