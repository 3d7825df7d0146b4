#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "vpt/errors.hpp"
#include "vpt/metrics.hpp"
#include "vpt/porter.hpp"
#include "vpt/rng.hpp"

using namespace vptlab;

namespace {
TokenSeq toks(const std::string& s) {
  TokenSeq out;
  std::istringstream in(s);
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}
}  // namespace

TEST_CASE("porter stemmer sample vocabulary") {
  CHECK(porter_stem("caresses") == "caress");
  CHECK(porter_stem("ponies") == "poni");
  CHECK(porter_stem("ties") == "ti");
  CHECK(porter_stem("cats") == "cat");
  CHECK(porter_stem("feed") == "feed");
  CHECK(porter_stem("agreed") == "agre");
  CHECK(porter_stem("plastered") == "plaster");
  CHECK(porter_stem("motoring") == "motor");
  CHECK(porter_stem("sing") == "sing");
  CHECK(porter_stem("conflated") == "conflat");
  CHECK(porter_stem("hopping") == "hop");
  CHECK(porter_stem("falling") == "fall");
  CHECK(porter_stem("hissing") == "hiss");
  CHECK(porter_stem("filing") == "file");
  CHECK(porter_stem("happy") == "happi");
  CHECK(porter_stem("sky") == "sky");
  CHECK(porter_stem("relational") == "relat");
  CHECK(porter_stem("conditional") == "condit");
  CHECK(porter_stem("rational") == "ration");
  CHECK(porter_stem("digitizer") == "digit");
  CHECK(porter_stem("operator") == "oper");
  CHECK(porter_stem("feudalism") == "feudal");
  CHECK(porter_stem("decisiveness") == "decis");
  CHECK(porter_stem("hopefulness") == "hope");
  CHECK(porter_stem("formaliti") == "formal");
  CHECK(porter_stem("electrical") == "electr");
  CHECK(porter_stem("hopeful") == "hope");
  CHECK(porter_stem("goodness") == "good");
  CHECK(porter_stem("revival") == "reviv");
  CHECK(porter_stem("adjustable") == "adjust");
  CHECK(porter_stem("replacement") == "replac");
  CHECK(porter_stem("adoption") == "adopt");
  CHECK(porter_stem("activate") == "activ");
  CHECK(porter_stem("effective") == "effect");
  CHECK(porter_stem("probate") == "probat");
  CHECK(porter_stem("rate") == "rate");
  CHECK(porter_stem("controlling") == "control");
  CHECK(porter_stem("rolling") == "roll");
  CHECK(porter_stem("at") == "at");
}

TEST_CASE("bleu4 exact match is 1") {
  auto h = toks("the function returns the sum");
  CHECK(bleu4(h, {h}) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bleu4 hand fixture with smoothed 4-gram") {
  // p1=3/4, p2=2/3, p3=1/2, p4 smoothed to 1/2, BP=1 -> (1/8)^(1/4)
  const double got = bleu4(toks("a b c d"), {toks("a b c e")});
  CHECK(got == doctest::Approx(std::pow(0.125, 0.25)).epsilon(1e-9));
  CHECK(got == doctest::Approx(0.5946035575).epsilon(1e-6));
}

TEST_CASE("bleu4 disjoint tokens give exactly 0") {
  CHECK(bleu4(toks("a b c d"), {toks("e f g h")}) == 0.0);
}

TEST_CASE("bleu4 brevity penalty uses closest reference length") {
  // hyp len 2, refs len 2 and 9: closest is 2 -> BP = 1
  auto h = toks("a b");
  const double with_close = bleu4(h, {toks("a b"), toks("a b c d e f g h i")});
  CHECK(with_close == doctest::Approx(1.0).epsilon(1e-9));
  // single long ref: BP = exp(1 - 4/2); p1 = p2 = 1, p3/p4 smoothed to 1
  const double short_hyp = bleu4(h, {toks("a b c d")});
  CHECK(short_hyp == doctest::Approx(std::exp(-1.0)).epsilon(1e-9));
}

TEST_CASE("bleu4 multi-reference is at least any single reference") {
  Rng rng(3);
  const std::vector<std::string> vocab = {"a", "b", "c", "d", "e", "f"};
  for (int trial = 0; trial < 50; ++trial) {
    auto draw = [&](int len) {
      TokenSeq s;
      for (int i = 0; i < len; ++i) s.push_back(vocab[rng.randint(vocab.size())]);
      return s;
    };
    auto h = draw(4 + static_cast<int>(rng.randint(4)));
    std::vector<TokenSeq> refs = {draw(5), draw(6), draw(7)};
    const double multi = bleu4(h, refs);
    for (const auto& r : refs) {
      CHECK(multi >= bleu4(h, {r}) - 1e-12);
    }
  }
}

TEST_CASE("rouge_l fixtures") {
  auto h = toks("a b c d");
  CHECK(rouge_l(h, {h}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rouge_l(toks("a b c d"), {toks("a c b d")}) == doctest::Approx(0.75).epsilon(1e-9));
  CHECK(rouge_l(toks("a b"), {toks("c d")}) == 0.0);
}

TEST_CASE("meteor_lite fixtures") {
  const double ident = meteor_lite(toks("a b c"), {toks("a b c")});
  CHECK(ident == doctest::Approx(1.0 - 0.5 / 27.0).epsilon(1e-9));
  CHECK(ident == doctest::Approx(0.9814814815).epsilon(1e-6));

  CHECK(meteor_lite(toks("a b"), {toks("c d")}) == 0.0);

  const double swapped = meteor_lite(toks("a b"), {toks("b a")});
  CHECK(swapped == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("meteor_lite stem stage matches inflected forms") {
  const double stemmed = meteor_lite(toks("running"), {toks("run")});
  CHECK(stemmed > 0.0);
  const double none = meteor_lite(toks("walking"), {toks("run")});
  CHECK(none == 0.0);
}

TEST_CASE("distinct_n fixtures") {
  const auto d1 = distinct_n({toks("a b"), toks("a b")}, 1);
  REQUIRE(d1.has_value());
  CHECK(*d1 == doctest::Approx(0.5).epsilon(1e-12));

  const auto full = distinct_n({toks("a b"), toks("c d")}, 1);
  REQUIRE(full.has_value());
  CHECK(*full == doctest::Approx(1.0).epsilon(1e-12));

  const auto d2 = distinct_n({toks("a b c"), toks("b c d")}, 2);
  REQUIRE(d2.has_value());
  CHECK(*d2 == doctest::Approx(0.75).epsilon(1e-12));

  CHECK(!distinct_n({toks("a")}, 2).has_value());
  CHECK_THROWS_AS(distinct_n({}, 1), usage_error);
}

TEST_CASE("distinct_n duplicate append never increases") {
  Rng rng(17);
  const std::vector<std::string> vocab = {"x", "y", "z", "w"};
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<TokenSeq> set;
    const int k = 2 + static_cast<int>(rng.randint(4));
    for (int i = 0; i < k; ++i) {
      TokenSeq s;
      const int len = 2 + static_cast<int>(rng.randint(4));
      for (int j = 0; j < len; ++j) s.push_back(vocab[rng.randint(vocab.size())]);
      set.push_back(s);
    }
    for (int n = 1; n <= 2; ++n) {
      const auto before = distinct_n(set, n);
      auto grown = set;
      grown.push_back(set[rng.randint(set.size())]);
      const auto after = distinct_n(grown, n);
      if (before && after) CHECK(*after <= *before + 1e-12);
    }
  }
}

TEST_CASE("distinct_n averaged mode") {
  // per-summary ratios: "a a b" -> 2/3, "c d" -> 1
  const auto avg = distinct_n_averaged({toks("a a b"), toks("c d")}, 1);
  REQUIRE(avg.has_value());
  CHECK(*avg == doctest::Approx((2.0 / 3 + 1.0) / 2).epsilon(1e-12));
  // set-level mode differs on the same input: 4 distinct of 5 total
  const auto setwise = distinct_n({toks("a a b"), toks("c d")}, 1);
  CHECK(*setwise == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("self_bleu fixtures") {
  auto s = toks("a b c d");
  CHECK(self_bleu({s, s, s}) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(self_bleu({toks("a b c d"), toks("e f g h")}) == doctest::Approx(0.0).epsilon(1e-12));

  // 3-element fixture vs mean of hand-computed ordered pairs
  std::vector<TokenSeq> set = {toks("a b c d"), toks("a b c e"), toks("a b x y")};
  double want = 0;
  int pairs = 0;
  for (size_t i = 0; i < set.size(); ++i) {
    for (size_t j = 0; j < set.size(); ++j) {
      if (i == j) continue;
      want += bleu4(set[i], {set[j]});
      pairs++;
    }
  }
  want /= pairs;
  CHECK(self_bleu(set) == doctest::Approx(want).epsilon(1e-12));
  CHECK_THROWS_AS(self_bleu({s}), usage_error);
}

TEST_CASE("self_bleu permutation invariance") {
  std::vector<TokenSeq> set = {toks("a b c d"), toks("a b c e"), toks("x y z w"), toks("a b x y")};
  std::vector<TokenSeq> perm = {set[2], set[0], set[3], set[1]};
  CHECK(self_bleu(set) == doctest::Approx(self_bleu(perm)).epsilon(1e-12));
}

TEST_CASE("oracle_score picks the max and is monotone") {
  auto refs = std::vector<TokenSeq>{toks("the list is sorted in place")};
  std::vector<TokenSeq> cands = {toks("sorts the list"), toks("the list is sorted in place")};
  CHECK(oracle_score(cands, refs, bleu4) == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<TokenSeq> one = {toks("sorts the list")};
  CHECK(oracle_score(one, refs, bleu4) == doctest::Approx(bleu4(one[0], refs)).epsilon(1e-12));

  // per-metric winners can differ
  std::vector<TokenSeq> mixed = {toks("a b c d"), toks("d c b a")};
  const double ob = oracle_score(mixed, {toks("a b c d")}, bleu4);
  const double orl = oracle_score(mixed, {toks("a b c d")}, rouge_l);
  CHECK(ob == doctest::Approx(1.0));
  CHECK(orl == doctest::Approx(1.0));

  double prev = oracle_score(one, refs, meteor_lite);
  std::vector<TokenSeq> grown = one;
  grown.push_back(toks("list sorted"));
  CHECK(oracle_score(grown, refs, meteor_lite) >= prev - 1e-12);
}

TEST_CASE("wilcoxon all-positive n=6 exact") {
  const auto res = wilcoxon_signed_rank({1.0, 2.0, 0.5, 3.0, 1.5, 2.5});
  CHECK(res.n_effective == 6);
  CHECK(res.exact);
  CHECK(res.statistic == doctest::Approx(21.0).epsilon(1e-12));
  CHECK(res.p_value == doctest::Approx(0.015625).epsilon(1e-9));
  CHECK(res.significant_at_005);
}

TEST_CASE("wilcoxon symmetric pairs near half") {
  // W = 10.5 of 21; enumeration counts ties at 10.5 fully -> 36/64
  const auto res = wilcoxon_signed_rank({1.0, -1.0, 2.0, -2.0, 3.0, -3.0});
  CHECK(res.p_value == doctest::Approx(36.0 / 64).epsilon(1e-12));
  CHECK(!res.significant_at_005);
}

TEST_CASE("wilcoxon n=8 mixed fixture matches exhaustive enumeration") {
  const std::vector<double> deltas = {0.4, -0.2, 0.7, 0.1, -0.5, 0.9, 0.3, -0.1};
  const auto res = wilcoxon_signed_rank(deltas);
  CHECK(res.n_effective == 8);

  // independent enumeration with freshly computed ranks
  std::vector<double> abs_sorted;
  for (double d : deltas) abs_sorted.push_back(std::fabs(d));
  std::vector<double> rank(deltas.size());
  for (size_t i = 0; i < deltas.size(); ++i) {
    double r = 0;
    int ties = 0, less = 0;
    for (size_t j = 0; j < deltas.size(); ++j) {
      if (std::fabs(deltas[j]) < std::fabs(deltas[i])) less++;
      if (std::fabs(deltas[j]) == std::fabs(deltas[i])) ties++;
    }
    r = less + (ties + 1) / 2.0;
    rank[i] = r;
  }
  double w = 0;
  for (size_t i = 0; i < deltas.size(); ++i) {
    if (deltas[i] > 0) w += rank[i];
  }
  int count = 0;
  for (int mask = 0; mask < 256; ++mask) {
    double s = 0;
    for (int i = 0; i < 8; ++i) {
      if (mask & (1 << i)) s += rank[i];
    }
    if (s >= w - 1e-9) count++;
  }
  CHECK(res.statistic == doctest::Approx(w).epsilon(1e-12));
  CHECK(res.p_value == doctest::Approx(count / 256.0).epsilon(1e-12));
}

TEST_CASE("wilcoxon drops zeros and validates input") {
  const auto res = wilcoxon_signed_rank({1.0, 0.0, 2.0, 0.0, 0.5, 3.0, 1.5, 2.5});
  CHECK(res.n_effective == 6);
  CHECK(res.p_value == doctest::Approx(0.015625).epsilon(1e-9));
  CHECK_THROWS_AS(wilcoxon_signed_rank({0.0, 0.0}), data_error);
  CHECK_THROWS_AS(wilcoxon_signed_rank({1.0, 2.0, 3.0}), data_error);
}

TEST_CASE("wilcoxon large-n normal approximation is sane") {
  // 20 positive deltas: p should be far below 0.05
  std::vector<double> deltas;
  for (int i = 1; i <= 20; ++i) deltas.push_back(i * 0.1);
  const auto pos = wilcoxon_signed_rank(deltas);
  CHECK(!pos.exact);
  CHECK(pos.p_value < 1e-4);

  // balanced signs: p near 0.5
  std::vector<double> bal;
  for (int i = 1; i <= 10; ++i) {
    bal.push_back(i * 0.1);
    bal.push_back(-i * 0.1);
  }
  const auto mid = wilcoxon_signed_rank(bal);
  CHECK(mid.p_value > 0.3);
  CHECK(mid.p_value < 0.7);
}

TEST_CASE("metric range and identity properties") {
  Rng rng(23);
  const std::vector<std::string> vocab = {"p", "q", "r", "s", "t"};
  for (int trial = 0; trial < 40; ++trial) {
    auto draw = [&](int len) {
      TokenSeq s;
      for (int i = 0; i < len; ++i) s.push_back(vocab[rng.randint(vocab.size())]);
      return s;
    };
    auto x = draw(4 + static_cast<int>(rng.randint(4)));
    auto y = draw(4 + static_cast<int>(rng.randint(4)));
    for (const auto& fn : {MetricFn(bleu4), MetricFn(rouge_l), MetricFn(meteor_lite)}) {
      const double self = fn(x, {x});
      const double cross = fn(x, {y});
      CHECK(self >= 0.0);
      CHECK(self <= 1.0 + 1e-12);
      CHECK(cross >= 0.0);
      CHECK(cross <= 1.0 + 1e-12);
      CHECK(self >= cross - 1e-12);
    }
    CHECK(bleu4(x, {x}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rouge_l(x, {x}) == doctest::Approx(1.0).epsilon(1e-12));
  }
}
