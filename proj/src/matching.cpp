#include "ciseg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ciseg {

namespace {
constexpr double kProbClamp = 1e-6;
constexpr double kDiceEps = 1.0;
}  // namespace

double bce_mean(const double* p, const uint8_t* t, int64_t n) {
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i)
    acc += t[i] ? -std::log(p[i]) : -std::log(1.0 - p[i]);
  return acc / double(n);
}

double dice_loss_probs(const double* p, const uint8_t* t, int64_t n) {
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    sp += p[i];
    if (t[i]) {
      inter += p[i];
      st += 1.0;
    }
  }
  return 1.0 - (2.0 * inter + kDiceEps) / (sp + st + kDiceEps);
}

Tensor<double> pairwise_cost(const Tensor<double>& class_probs, const Tensor<double>& mask_probs,
                             const std::vector<int>& target_cols,
                             const std::vector<const uint8_t*>& target_masks,
                             const CostWeights& weights) {
  if (class_probs.ndim() != 2 || mask_probs.ndim() != 2)
    throw std::invalid_argument("pairwise_cost: expects 2-D prob matrices");
  const int n = class_probs.dim(0);
  const int k1 = class_probs.dim(1);
  const int m = int(target_cols.size());
  const int64_t hw = mask_probs.dim(1);
  if (n < 1) throw std::invalid_argument("pairwise_cost: need at least one candidate");
  if (mask_probs.dim(0) != n) throw std::invalid_argument("pairwise_cost: row count mismatch");
  if (int(target_masks.size()) != m)
    throw std::invalid_argument("pairwise_cost: target count mismatch");
  for (int j = 0; j < m; ++j)
    if (target_cols[j] < 0 || target_cols[j] >= k1 - 1)
      throw std::invalid_argument("pairwise_cost: target class column " +
                                  std::to_string(target_cols[j]) + " not in label space");

  // clamp once per candidate row
  Tensor<double> clamped = mask_probs;
  for (int64_t i = 0; i < clamped.numel(); ++i)
    clamped[i] = std::min(1.0 - kProbClamp, std::max(kProbClamp, clamped[i]));

  Tensor<double> cost({n, m});
  for (int i = 0; i < n; ++i) {
    const double* pm = clamped.data() + int64_t(i) * hw;
    for (int j = 0; j < m; ++j) {
      double c = weights.w_class * -class_probs.at(i, target_cols[j]) +
                 weights.w_ce * bce_mean(pm, target_masks[size_t(j)], hw) +
                 weights.w_dice * dice_loss_probs(pm, target_masks[size_t(j)], hw);
      if (!std::isfinite(c)) throw std::runtime_error("pairwise_cost: non-finite entry");
      cost.at(i, j) = c;
    }
  }
  return cost;
}

double assignment_total(const Tensor<double>& cost,
                        const std::vector<std::pair<int, int>>& pairs) {
  double tot = 0.0;
  for (const auto& [q, gt] : pairs) tot += cost.at(q, gt);
  return tot;
}

namespace {

// Jonker-Volgenant style shortest augmenting path assignment of columns to
// rows, n rows >= m cols. Returns for each column the assigned row.
std::vector<int> solve_rectangular(const Tensor<double>& cost) {
  const int n = cost.dim(0);
  const int m = cost.dim(1);
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(size_t(m) + 1, 0.0), v(size_t(n) + 1, 0.0);
  std::vector<int> p(size_t(n) + 1, 0);  // p[row 1..n] = col assigned (0 = none)
  std::vector<int> way(size_t(n) + 1, 0);
  for (int j = 1; j <= m; ++j) {
    p[0] = j;
    int j0 = 0;
    std::vector<double> minv(size_t(n) + 1, inf);
    std::vector<char> used(size_t(n) + 1, 0);
    do {
      used[size_t(j0)] = 1;
      int i0 = p[size_t(j0)], j1 = 0;
      double delta = inf;
      for (int i = 1; i <= n; ++i) {
        if (used[size_t(i)]) continue;
        double cur = cost.at(i - 1, i0 - 1) - u[size_t(i0)] - v[size_t(i)];
        if (cur < minv[size_t(i)]) {
          minv[size_t(i)] = cur;
          way[size_t(i)] = j0;
        }
        if (minv[size_t(i)] < delta) {
          delta = minv[size_t(i)];
          j1 = i;
        }
      }
      for (int i = 0; i <= n; ++i) {
        if (used[size_t(i)]) {
          u[size_t(p[size_t(i)])] += delta;
          v[size_t(i)] -= delta;
        } else {
          minv[size_t(i)] -= delta;
        }
      }
      j0 = j1;
    } while (p[size_t(j0)] != 0);
    do {
      int j1 = way[size_t(j0)];
      p[size_t(j0)] = p[size_t(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> col_to_row(size_t(m), -1);
  for (int i = 1; i <= n; ++i)
    if (p[size_t(i)] > 0) col_to_row[size_t(p[size_t(i)] - 1)] = i - 1;
  return col_to_row;
}

double optimum_value(const Tensor<double>& cost) {
  auto rows = solve_rectangular(cost);
  double tot = 0.0;
  for (int j = 0; j < int(rows.size()); ++j) tot += cost.at(rows[size_t(j)], j);
  return tot;
}

// Reduced problem with some rows removed and the first `skip_cols` columns
// dropped (they are already fixed).
Tensor<double> reduce(const Tensor<double>& cost, const std::vector<char>& row_used,
                      int skip_cols, std::vector<int>* row_map) {
  const int n = cost.dim(0);
  const int m = cost.dim(1);
  row_map->clear();
  for (int i = 0; i < n; ++i)
    if (!row_used[size_t(i)]) row_map->push_back(i);
  Tensor<double> out({int(row_map->size()), m - skip_cols});
  for (size_t r = 0; r < row_map->size(); ++r)
    for (int j = skip_cols; j < m; ++j)
      out.at(int(r), j - skip_cols) = cost.at((*row_map)[r], j);
  return out;
}

}  // namespace

Assignment hungarian(const Tensor<double>& cost) {
  if (cost.ndim() != 2) throw std::invalid_argument("hungarian: expects a 2-D cost matrix");
  const int n = cost.dim(0);
  const int m = cost.dim(1);
  if (n < m)
    throw std::invalid_argument("hungarian: more ground truths than candidate queries (" +
                                std::to_string(m) + " > " + std::to_string(n) + ")");
  for (int64_t i = 0; i < cost.numel(); ++i)
    if (!std::isfinite(cost[i])) throw std::invalid_argument("hungarian: non-finite cost entry");
  if (m == 0) return {};

  const double best_total = optimum_value(cost);

  // Fix columns in order, always taking the smallest row that still admits an
  // optimal completion. This pins the lexicographically smallest optimal
  // assignment, so ties resolve identically to the brute-force oracle.
  Assignment out;
  std::vector<char> row_used(size_t(n), 0);
  double fixed_cost = 0.0;
  for (int j = 0; j < m; ++j) {
    bool placed = false;
    for (int i = 0; i < n && !placed; ++i) {
      if (row_used[size_t(i)]) continue;
      double candidate_fixed = fixed_cost + cost.at(i, j);
      double remaining = 0.0;
      if (j + 1 < m) {
        row_used[size_t(i)] = 1;
        std::vector<int> row_map;
        Tensor<double> sub = reduce(cost, row_used, j + 1, &row_map);
        remaining = optimum_value(sub);
        row_used[size_t(i)] = 0;
      }
      if (candidate_fixed + remaining == best_total) {
        out.pairs.emplace_back(i, j);
        row_used[size_t(i)] = 1;
        fixed_cost = candidate_fixed;
        placed = true;
      }
    }
    if (!placed) {
      // floating-point potentials disagreed with the greedy re-solve; fall
      // back to the plain optimal solution for this matrix
      auto rows = solve_rectangular(cost);
      out.pairs.clear();
      for (int jj = 0; jj < m; ++jj) out.pairs.emplace_back(rows[size_t(jj)], jj);
      out.total_cost = assignment_total(cost, out.pairs);
      return out;
    }
  }
  out.total_cost = assignment_total(cost, out.pairs);
  return out;
}

Assignment brute_force_match(const Tensor<double>& cost) {
  if (cost.ndim() != 2) throw std::invalid_argument("brute_force_match: expects 2-D");
  const int n = cost.dim(0);
  const int m = cost.dim(1);
  if (m > 7) throw std::invalid_argument("brute_force_match: more than 7 targets");
  if (n < m) throw std::invalid_argument("brute_force_match: more ground truths than candidates");
  if (m == 0) return {};

  std::vector<int> best;
  double best_total = std::numeric_limits<double>::infinity();
  std::vector<int> cur(size_t(m), -1);
  std::vector<char> used(size_t(n), 0);
  // enumerate query choices for gt 0, then gt 1, ... in ascending order: the
  // first optimum found is the lexicographically smallest
  auto rec = [&](auto&& self, int j, double acc) -> void {
    if (j == m) {
      if (acc < best_total) {
        best_total = acc;
        best.assign(cur.begin(), cur.end());
      }
      return;
    }
    for (int i = 0; i < n; ++i) {
      if (used[size_t(i)]) continue;
      cur[size_t(j)] = i;
      used[size_t(i)] = 1;
      self(self, j + 1, acc + cost.at(i, j));
      used[size_t(i)] = 0;
    }
  };
  rec(rec, 0, 0.0);

  Assignment out;
  for (int j = 0; j < m; ++j) out.pairs.emplace_back(best[size_t(j)], j);
  out.total_cost = assignment_total(cost, out.pairs);
  return out;
}

Assignment match_rows(const Tensor<double>& cost_all_rows, int row_begin, int row_end) {
  const int n = cost_all_rows.dim(0);
  const int m = cost_all_rows.dim(1);
  if (row_begin < 0 || row_end > n || row_begin >= row_end)
    throw std::invalid_argument("match_rows: bad row range");
  Tensor<double> sub({row_end - row_begin, m});
  for (int i = row_begin; i < row_end; ++i)
    for (int j = 0; j < m; ++j) sub.at(i - row_begin, j) = cost_all_rows.at(i, j);
  Assignment a = hungarian(sub);
  for (auto& [q, gt] : a.pairs) q += row_begin;
  return a;
}

}  // namespace ciseg
