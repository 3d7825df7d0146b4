#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace vptlab {

using TokenSeq = std::vector<std::string>;

// Sentence BLEU with n-gram orders 1..4, multi-reference clipping, brevity
// penalty against the closest reference length, and add-one smoothing of any
// zero match count for orders >= 2. A zero unigram match count is not
// smoothed and yields 0.
double bleu4(const TokenSeq& hyp, const std::vector<TokenSeq>& refs);

// LCS F-measure with beta = 1; multi-reference takes the max over refs.
double rouge_l(const TokenSeq& hyp, const std::vector<TokenSeq>& refs);

// Unigram matcher with exact and Porter-stem stages, F_mean = 10PR/(R+9P),
// fragmentation penalty 0.5*(chunks/matches)^3; max over refs.
double meteor_lite(const TokenSeq& hyp, const std::vector<TokenSeq>& refs);

// Unique n-grams across the whole set divided by the total n-gram count.
// Empty total (no summary reaches n tokens) has no defined value.
std::optional<double> distinct_n(const std::vector<TokenSeq>& summaries, int n);

// Alternative reading: per-summary distinct ratio, averaged over summaries
// that have at least one n-gram.
std::optional<double> distinct_n_averaged(const std::vector<TokenSeq>& summaries, int n);

// Mean of bleu4(s_i, {s_j}) over ordered pairs i != j; needs at least 2
// members.
double self_bleu(const std::vector<TokenSeq>& summaries);

using MetricFn = std::function<double(const TokenSeq&, const std::vector<TokenSeq>&)>;

// Max metric value over the candidate set.
double oracle_score(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& refs,
                    const MetricFn& metric);

struct WilcoxonResult {
  double statistic = 0.0;
  int n_effective = 0;
  double p_value = 1.0;
  bool significant_at_005 = false;
  bool exact = false;
};

// One-sided (greater) Wilcoxon signed-rank test on paired deltas. Zero
// deltas are dropped, tied absolute values get averaged ranks. Exact null
// enumeration for n <= 12, normal approximation with continuity correction
// above. Requires at least 5 nonzero deltas.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& deltas);

}  // namespace vptlab
