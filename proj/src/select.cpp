#include "vpt/select.hpp"

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <string>

#include "vpt/errors.hpp"
#include "vpt/metrics.hpp"

namespace vptlab {

namespace {

void check_member(const std::vector<Candidate>& pool, int idx) {
  if (idx < 0 || idx >= static_cast<int>(pool.size())) {
    throw usage_error("selection: subset index out of range");
  }
  const Candidate& c = pool[idx];
  if (c.per_token_logprob.empty() || c.length < 1) {
    throw data_error("selection: zero-length candidate in pool");
  }
  if (static_cast<int>(c.per_token_logprob.size()) != c.length ||
      static_cast<int>(c.tokens.size()) < c.length + 1) {
    throw data_error("selection: malformed candidate in pool");
  }
}

double normalized(const Candidate& c) {
  double sum = 0.0;
  for (double lp : c.per_token_logprob) sum += lp;
  return sum / static_cast<double>(c.length);
}

// Content tokens as text; id equality is token equality, so BLEU over
// stringified ids matches BLEU over the detokenized words.
TokenSeq content_text(const Candidate& c) {
  TokenSeq out;
  out.reserve(c.length);
  for (int t = 1; t <= c.length; ++t) {
    out.push_back(std::to_string(c.tokens[t]));
  }
  return out;
}

// Pairwise distance cache: d(i, j) = 1 - BLEU4(pool[i], {pool[j]}),
// computed lazily, local to one selection call.
class PairCache {
 public:
  explicit PairCache(const std::vector<Candidate>& pool)
      : n_(pool.size()), text_(pool.size()), d_(pool.size() * pool.size(), -1.0) {
    for (size_t i = 0; i < pool.size(); ++i) text_[i] = content_text(pool[i]);
  }

  double dist(int i, int j) {
    double& slot = d_[static_cast<size_t>(i) * n_ + j];
    if (slot < 0.0) slot = 1.0 - bleu4(text_[i], {text_[j]});
    return slot;
  }

 private:
  size_t n_;
  std::vector<TokenSeq> text_;
  std::vector<double> d_;
};

std::vector<int> whole_pool(size_t n) {
  std::vector<int> all(n);
  for (size_t i = 0; i < n; ++i) all[i] = static_cast<int>(i);
  return all;
}

SelectionResult finish_result(const std::vector<Candidate>& pool,
                              const SelectionConfig& cfg,
                              std::vector<int> chosen) {
  SelectionResult r;
  r.chosen = std::move(chosen);
  r.g_value = quality_g(pool, r.chosen);
  r.h_value = diversity_h(pool, r.chosen);
  r.objective_value = cfg.alpha * r.g_value + cfg.beta * r.h_value;
  return r;
}

bool warn_small_pool(const std::vector<Candidate>& pool,
                     const SelectionConfig& cfg) {
  if (static_cast<int>(pool.size()) >= cfg.subset_size) return false;
  std::cerr << "vptlab: selection pool has " << pool.size()
            << " candidates, fewer than subset size " << cfg.subset_size
            << "; selecting the whole pool\n";
  return true;
}

// C(n, k), saturating above the brute-force budget.
int64_t binomial_capped(int n, int k, int64_t cap) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  int64_t c = 1;
  for (int i = 1; i <= k; ++i) {
    c = c * (n - k + i) / i;
    if (c > cap) return cap + 1;
  }
  return c;
}

}  // namespace

void SelectionConfig::validate() const {
  if (subset_size < 1) throw usage_error("selection: subset_size must be >= 1");
  if (pool_size < subset_size) {
    throw usage_error("selection: pool_size must be >= subset_size");
  }
  if (!(alpha >= 0.0) || !(beta >= 0.0)) {
    throw usage_error("selection: alpha and beta must be nonnegative");
  }
  if (!(alpha + beta > 0.0)) {
    throw usage_error("selection: alpha + beta must be positive");
  }
}

double quality_g(const std::vector<Candidate>& pool,
                 const std::vector<int>& subset) {
  double g = 0.0;
  for (int idx : subset) {
    check_member(pool, idx);
    g += normalized(pool[idx]);
  }
  return g;
}

double diversity_h(const std::vector<Candidate>& pool,
                   const std::vector<int>& subset) {
  for (int idx : subset) check_member(pool, idx);
  double h = 0.0;
  std::vector<TokenSeq> text;
  text.reserve(subset.size());
  for (int idx : subset) text.push_back(content_text(pool[idx]));
  for (size_t i = 0; i < subset.size(); ++i) {
    for (size_t j = 0; j < subset.size(); ++j) {
      if (i == j) continue;
      h += 1.0 - bleu4(text[i], {text[j]});
    }
  }
  return h;
}

SelectionResult greedy_select(const std::vector<Candidate>& pool,
                              const SelectionConfig& cfg) {
  cfg.validate();
  for (size_t i = 0; i < pool.size(); ++i) check_member(pool, static_cast<int>(i));
  if (warn_small_pool(pool, cfg)) {
    return finish_result(pool, cfg, whole_pool(pool.size()));
  }

  const int p = static_cast<int>(pool.size());
  PairCache cache(pool);
  std::vector<double> quality(p);
  for (int i = 0; i < p; ++i) quality[i] = normalized(pool[i]);

  std::vector<int> chosen;
  std::vector<char> taken(p, 0);
  for (int round = 0; round < cfg.subset_size; ++round) {
    int best = -1;
    double best_gain = 0.0;
    for (int i = 0; i < p; ++i) {
      if (taken[i]) continue;
      double dh = 0.0;
      for (int j : chosen) dh += cache.dist(i, j) + cache.dist(j, i);
      const double gain = cfg.alpha * quality[i] + cfg.beta * dh;
      if (best < 0 || gain > best_gain) {
        best = i;
        best_gain = gain;
      }
    }
    chosen.push_back(best);
    taken[best] = 1;
  }
  return finish_result(pool, cfg, std::move(chosen));
}

SelectionResult brute_force_select(const std::vector<Candidate>& pool,
                                   const SelectionConfig& cfg) {
  cfg.validate();
  for (size_t i = 0; i < pool.size(); ++i) check_member(pool, static_cast<int>(i));
  if (warn_small_pool(pool, cfg)) {
    return finish_result(pool, cfg, whole_pool(pool.size()));
  }

  const int p = static_cast<int>(pool.size());
  const int u = cfg.subset_size;
  constexpr int64_t kMaxSubsets = 1000000;
  if (binomial_capped(p, u, kMaxSubsets) > kMaxSubsets) {
    throw usage_error("selection: brute force refused, more than 1e6 subsets");
  }

  PairCache cache(pool);
  std::vector<double> quality(p);
  for (int i = 0; i < p; ++i) quality[i] = normalized(pool[i]);

  // Lexicographic enumeration of index subsets; strict improvement keeps
  // the earliest, which is the documented tie-break.
  std::vector<int> idx(u);
  for (int i = 0; i < u; ++i) idx[i] = i;
  std::vector<int> best_set;
  double best_obj = 0.0;
  bool have = false;
  while (true) {
    double g = 0.0, h = 0.0;
    for (int i = 0; i < u; ++i) {
      g += quality[idx[i]];
      for (int j = 0; j < u; ++j) {
        if (i != j) h += cache.dist(idx[i], idx[j]);
      }
    }
    const double obj = cfg.alpha * g + cfg.beta * h;
    if (!have || obj > best_obj) {
      have = true;
      best_obj = obj;
      best_set = idx;
    }
    int k = u - 1;
    while (k >= 0 && idx[k] == p - u + k) --k;
    if (k < 0) break;
    ++idx[k];
    for (int i = k + 1; i < u; ++i) idx[i] = idx[i - 1] + 1;
  }
  return finish_result(pool, cfg, std::move(best_set));
}

}  // namespace vptlab
