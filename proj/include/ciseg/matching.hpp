#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ciseg/tensor.hpp"

namespace ciseg {

struct CostWeights {
  double w_class = 2.0;
  double w_ce = 5.0;
  double w_dice = 5.0;
};

// One (query, ground-truth) pair per ground truth. `pairs` is kept sorted by
// ground-truth index; tie-breaking across equally cheap assignments picks the
// lexicographically smallest query vector (q for gt0, q for gt1, ...).
struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (query_index, ground_truth_index)
  double total_cost = 0.0;
};

struct MaskTarget {
  int class_id = -1;                // global class id
  std::vector<uint8_t> mask;        // H*W, binary
};

// Matching cost between candidate predictions and targets. class_probs is
// [n, K+1] softmax output (last column no-object), mask_probs is [n, HW]
// sigmoid output. target_cols maps each target to its class-head column; an
// out-of-range column means the class is not in the label space yet.
// All arithmetic is double so the brute-force comparison is exact.
Tensor<double> pairwise_cost(const Tensor<double>& class_probs, const Tensor<double>& mask_probs,
                             const std::vector<int>& target_cols,
                             const std::vector<const uint8_t*>& target_masks,
                             const CostWeights& weights);

// Minimum-cost injective assignment of targets (columns) into candidates
// (rows); requires rows >= cols and finite entries.
Assignment hungarian(const Tensor<double>& cost);

// Exhaustive oracle, cols <= 7; identical tie-breaking to hungarian().
Assignment brute_force_match(const Tensor<double>& cost);

// Shared helper: total cost of a pair list summed in ascending ground-truth
// order, so equal pair sets produce bit-identical totals everywhere.
double assignment_total(const Tensor<double>& cost, const std::vector<std::pair<int, int>>& pairs);

// Matching restricted to the rows [row_begin, row_end) of the candidate set;
// returned query indices are global (offset by row_begin).
Assignment match_rows(const Tensor<double>& cost_all_rows, int row_begin, int row_end);

// Losses used inside the cost; exposed for the per-entry recomputation tests.
double bce_mean(const double* p, const uint8_t* t, int64_t n);   // p already clamped
double dice_loss_probs(const double* p, const uint8_t* t, int64_t n);  // eps = 1

}  // namespace ciseg
