#include "vpt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>

#include "vpt/errors.hpp"
#include "vpt/porter.hpp"

namespace vptlab {

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, int> ngram_counts(const TokenSeq& s, int n) {
  std::map<Ngram, int> counts;
  if (static_cast<int>(s.size()) < n) return counts;
  for (size_t i = 0; i + n <= s.size(); ++i) {
    counts[Ngram(s.begin() + i, s.begin() + i + n)]++;
  }
  return counts;
}

int lcs_length(const TokenSeq& a, const TokenSeq& b) {
  const size_t n = b.size();
  std::vector<int> prev(n + 1, 0), cur(n + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= n; ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

double meteor_one(const TokenSeq& hyp, const TokenSeq& ref) {
  std::vector<int> align(hyp.size(), -1);
  std::vector<bool> used(ref.size(), false);
  for (size_t i = 0; i < hyp.size(); ++i) {
    for (size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && hyp[i] == ref[j]) {
        align[i] = static_cast<int>(j);
        used[j] = true;
        break;
      }
    }
  }
  std::vector<std::string> hyp_stem(hyp.size()), ref_stem(ref.size());
  for (size_t i = 0; i < hyp.size(); ++i) hyp_stem[i] = porter_stem(hyp[i]);
  for (size_t j = 0; j < ref.size(); ++j) ref_stem[j] = porter_stem(ref[j]);
  for (size_t i = 0; i < hyp.size(); ++i) {
    if (align[i] >= 0) continue;
    for (size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && hyp_stem[i] == ref_stem[j]) {
        align[i] = static_cast<int>(j);
        used[j] = true;
        break;
      }
    }
  }
  int matches = 0;
  for (int a : align) {
    if (a >= 0) matches++;
  }
  if (matches == 0) return 0.0;
  const double p = static_cast<double>(matches) / hyp.size();
  const double r = static_cast<double>(matches) / ref.size();
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  // A chunk is a maximal run of matched unigrams adjacent in both sequences.
  int chunks = 0;
  int prev_i = -10, prev_j = -10;
  for (size_t i = 0; i < hyp.size(); ++i) {
    if (align[i] < 0) continue;
    if (static_cast<int>(i) != prev_i + 1 || align[i] != prev_j + 1) chunks++;
    prev_i = static_cast<int>(i);
    prev_j = align[i];
  }
  const double frag = static_cast<double>(chunks) / matches;
  const double penalty = 0.5 * frag * frag * frag;
  return f_mean * (1.0 - penalty);
}

}  // namespace

double bleu4(const TokenSeq& hyp, const std::vector<TokenSeq>& refs) {
  if (refs.empty()) throw usage_error("bleu4: at least one reference required");
  if (hyp.empty()) return 0.0;
  const int max_order = 4;
  double log_sum = 0.0;
  for (int n = 1; n <= max_order; ++n) {
    const auto hyp_counts = ngram_counts(hyp, n);
    std::map<Ngram, int> clip_counts;
    for (const auto& ref : refs) {
      for (const auto& [gram, count] : ngram_counts(ref, n)) {
        clip_counts[gram] = std::max(clip_counts[gram], count);
      }
    }
    int64_t total = 0, matched = 0;
    for (const auto& [gram, count] : hyp_counts) {
      total += count;
      const auto it = clip_counts.find(gram);
      if (it != clip_counts.end()) matched += std::min(count, it->second);
    }
    double p;
    if (matched > 0) {
      p = static_cast<double>(matched) / static_cast<double>(total);
    } else if (n == 1) {
      return 0.0;
    } else {
      p = 1.0 / static_cast<double>(total + 1);
    }
    log_sum += std::log(p) / max_order;
  }
  const int64_t c = static_cast<int64_t>(hyp.size());
  int64_t r = static_cast<int64_t>(refs[0].size());
  for (const auto& ref : refs) {
    const int64_t len = static_cast<int64_t>(ref.size());
    if (std::llabs(len - c) < std::llabs(r - c) || (std::llabs(len - c) == std::llabs(r - c) && len < r)) {
      r = len;
    }
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);
  return bp * std::exp(log_sum);
}

double rouge_l(const TokenSeq& hyp, const std::vector<TokenSeq>& refs) {
  if (refs.empty()) throw usage_error("rouge_l: at least one reference required");
  if (hyp.empty()) return 0.0;
  double best = 0.0;
  for (const auto& ref : refs) {
    if (ref.empty()) continue;
    const int lcs = lcs_length(hyp, ref);
    if (lcs == 0) continue;
    const double p = static_cast<double>(lcs) / hyp.size();
    const double r = static_cast<double>(lcs) / ref.size();
    best = std::max(best, 2.0 * p * r / (p + r));
  }
  return best;
}

double meteor_lite(const TokenSeq& hyp, const std::vector<TokenSeq>& refs) {
  if (refs.empty()) throw usage_error("meteor_lite: at least one reference required");
  if (hyp.empty()) return 0.0;
  double best = 0.0;
  for (const auto& ref : refs) {
    if (ref.empty()) continue;
    best = std::max(best, meteor_one(hyp, ref));
  }
  return best;
}

std::optional<double> distinct_n(const std::vector<TokenSeq>& summaries, int n) {
  if (n < 1) throw usage_error("distinct_n: n must be positive");
  if (summaries.empty()) throw usage_error("distinct_n: empty summary set");
  std::set<Ngram> unique;
  int64_t total = 0;
  for (const auto& s : summaries) {
    if (static_cast<int>(s.size()) < n) continue;
    for (size_t i = 0; i + n <= s.size(); ++i) {
      unique.insert(Ngram(s.begin() + i, s.begin() + i + n));
      total++;
    }
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

std::optional<double> distinct_n_averaged(const std::vector<TokenSeq>& summaries, int n) {
  if (n < 1) throw usage_error("distinct_n: n must be positive");
  if (summaries.empty()) throw usage_error("distinct_n: empty summary set");
  double sum = 0.0;
  int counted = 0;
  for (const auto& s : summaries) {
    if (static_cast<int>(s.size()) < n) continue;
    std::set<Ngram> unique;
    int64_t total = 0;
    for (size_t i = 0; i + n <= s.size(); ++i) {
      unique.insert(Ngram(s.begin() + i, s.begin() + i + n));
      total++;
    }
    sum += static_cast<double>(unique.size()) / static_cast<double>(total);
    counted++;
  }
  if (counted == 0) return std::nullopt;
  return sum / counted;
}

double self_bleu(const std::vector<TokenSeq>& summaries) {
  if (summaries.size() < 2) throw usage_error("self_bleu: need at least 2 summaries");
  double sum = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < summaries.size(); ++i) {
    for (size_t j = 0; j < summaries.size(); ++j) {
      if (i == j) continue;
      sum += bleu4(summaries[i], {summaries[j]});
      pairs++;
    }
  }
  return sum / static_cast<double>(pairs);
}

double oracle_score(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& refs,
                    const MetricFn& metric) {
  if (candidates.empty()) throw usage_error("oracle_score: empty candidate set");
  double best = 0.0;
  for (const auto& c : candidates) best = std::max(best, metric(c, refs));
  return best;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& deltas) {
  std::vector<double> nz;
  for (double d : deltas) {
    if (d != 0.0) nz.push_back(d);
  }
  if (nz.empty()) throw data_error("wilcoxon: all deltas are zero");
  if (nz.size() < 5) {
    throw data_error("wilcoxon: need at least 5 nonzero deltas, got " + std::to_string(nz.size()));
  }
  const int n = static_cast<int>(nz.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return std::fabs(nz[a]) < std::fabs(nz[b]); });
  std::vector<double> rank(n, 0.0);
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n && std::fabs(nz[order[j + 1]]) == std::fabs(nz[order[i]])) j++;
    const double avg = (i + j + 2) / 2.0;
    for (int t = i; t <= j; ++t) rank[order[t]] = avg;
    i = j + 1;
  }
  double w_plus = 0.0;
  for (int t = 0; t < n; ++t) {
    if (nz[t] > 0) w_plus += rank[t];
  }

  WilcoxonResult res;
  res.statistic = w_plus;
  res.n_effective = n;
  if (n <= 12) {
    res.exact = true;
    const uint32_t total = 1u << n;
    uint32_t at_least = 0;
    for (uint32_t mask = 0; mask < total; ++mask) {
      double s = 0.0;
      for (int t = 0; t < n; ++t) {
        if (mask & (1u << t)) s += rank[t];
      }
      if (s >= w_plus - 1e-9) at_least++;
    }
    res.p_value = static_cast<double>(at_least) / static_cast<double>(total);
  } else {
    const double mean = n * (n + 1) / 4.0;
    double tie_corr = 0.0;
    i = 0;
    std::vector<double> sorted_abs(n);
    for (int t = 0; t < n; ++t) sorted_abs[t] = std::fabs(nz[order[t]]);
    while (i < n) {
      int j = i;
      while (j + 1 < n && sorted_abs[j + 1] == sorted_abs[i]) j++;
      const double t = j - i + 1;
      tie_corr += (t * t * t - t) / 48.0;
      i = j + 1;
    }
    const double var = n * (n + 1) * (2.0 * n + 1) / 24.0 - tie_corr;
    if (var <= 0) throw numeric_error("wilcoxon: degenerate variance from ties");
    const double z = (w_plus - mean - 0.5) / std::sqrt(var);
    res.p_value = 0.5 * std::erfc(z / std::sqrt(2.0));
  }
  res.significant_at_005 = res.p_value < 0.05;
  return res;
}

}  // namespace vptlab
