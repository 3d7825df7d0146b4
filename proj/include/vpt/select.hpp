#pragma once

#include <vector>

#include "vpt/decode.hpp"

namespace vptlab {

// Bi-criteria subset selection: pick subset_size of the pool maximizing
// alpha * quality + beta * diversity. Pools are expected deduplicated and
// rescored (see rescore_candidates) before selection.
struct SelectionConfig {
  int subset_size = 10;  // U
  int pool_size = 100;   // N, nominal pool size the weights were tuned for
  double alpha = 1.0;
  double beta = 1.0;

  // 1 <= subset_size <= pool_size, weights nonnegative with positive sum.
  void validate() const;
};

struct SelectionResult {
  std::vector<int> chosen;  // indices into the pool, in pick order
  double g_value = 0.0;
  double h_value = 0.0;
  double objective_value = 0.0;  // alpha * g_value + beta * h_value
};

// Sum of length-normalized log-probabilities over the subset: for each
// candidate, (sum of per-token log-probs) / length. Empty subset gives 0.
// A candidate without per-token log-probs is a contract violation.
double quality_g(const std::vector<Candidate>& pool,
                 const std::vector<int>& subset);

// Sum over ordered pairs i != j of 1 - BLEU4(y_i, {y_j}), using the metrics
// module's smoothed sentence BLEU on content tokens. BLEU is asymmetric, so
// both directions of each pair count. Singletons and empty subsets give 0.
double diversity_h(const std::vector<Candidate>& pool,
                   const std::vector<int>& subset);

// Greedy marginal-gain maximization of alpha * g + beta * h: starting from
// the empty set, repeatedly add the candidate with the largest objective
// increase; ties go to the lowest index. A pool smaller than subset_size is
// selected whole, with a warning on stderr. Deterministic; pairwise BLEU
// values are cached for the duration of one call.
SelectionResult greedy_select(const std::vector<Candidate>& pool,
                              const SelectionConfig& cfg);

// Exact argmax over all subsets of size subset_size, as a test oracle. Ties
// break toward the lexicographically smallest index set. Refuses pools where
// the number of subsets exceeds 1e6.
SelectionResult brute_force_select(const std::vector<Candidate>& pool,
                                   const SelectionConfig& cfg);

}  // namespace vptlab
