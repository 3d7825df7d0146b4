#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "vpt/adam.hpp"
#include "vpt/corpus.hpp"
#include "vpt/errors.hpp"
#include "vpt/vpt_model.hpp"

using namespace vptlab;
namespace fs = std::filesystem;

namespace {

BackboneConfig tiny_config(int vocab) {
  BackboneConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_len = 48;
  cfg.dropout_rate = 0.0f;
  return cfg;
}

VPTConfig tiny_vpt_config() {
  VPTConfig cfg;
  cfg.hidden_dim = 16;
  return cfg;
}

// Shared tiny world: corpus, vocab, frozen backbone and the phase-2 pairs.
struct Fixture {
  CorpusSplits corpus;
  Vocabulary vocab;
  Backbone model;
  std::vector<SummaryPair> pairs;

  Fixture()
      : corpus(generate_corpus(11, 20)),
        vocab(Vocabulary::build(corpus.train)),
        model(tiny_config(vocab.size()), 3) {
    model.set_trainable(false);
    pairs = make_summary_pairs(corpus.train, vocab, model.config().max_len);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

std::vector<const SummaryPair*> take_pairs(const std::vector<SummaryPair>& all,
                                           int n, int offset = 0) {
  REQUIRE(offset + n <= static_cast<int>(all.size()));
  std::vector<const SummaryPair*> out;
  for (int i = 0; i < n; ++i) out.push_back(&all[offset + i]);
  return out;
}

double grad_l1(const ParamList& params, const std::string& name) {
  for (const auto& p : params) {
    if (p.name == name) {
      REQUIRE(p.tensor->grad != nullptr);
      double s = 0;
      for (float g : *p.tensor->grad) s += std::abs(g);
      return s;
    }
  }
  FAIL("param not found: " << name);
  return 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>((*a.data)[i]) - (*b.data)[i]));
  }
  return m;
}

// Closed-form KL of diagonal Gaussians against unit-variance priors, in
// doubles, as an independent oracle for the taped implementation.
double kl_closed_form(const std::vector<double>& mu_q,
                      const std::vector<double>& sigma_q,
                      const std::vector<double>& mu_p, int n_examples) {
  double s = 0;
  for (size_t i = 0; i < mu_q.size(); ++i) {
    double d = mu_q[i] - mu_p[i];
    s += 0.5 * (sigma_q[i] * sigma_q[i] + d * d - 1.0 -
                2.0 * std::log(sigma_q[i]));
  }
  return s / n_examples;
}

PosteriorOutput make_q(const std::vector<float>& mu,
                       const std::vector<float>& sigma, int rows) {
  int cols = static_cast<int>(mu.size()) / rows;
  PosteriorOutput q;
  q.mu = Tensor::from_vector({rows, cols}, mu);
  q.sigma = Tensor::from_vector({rows, cols}, sigma);
  return q;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("vpt config validation rejects bad values") {
  VPTConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.n_pool_tokens = 0;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg = VPTConfig{};
  cfg.hidden_dim = 0;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg = VPTConfig{};
  cfg.inference_sigma_scale = 0.0f;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg = VPTConfig{};
  cfg.kl_ramp_fraction = 0.0f;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg.kl_ramp_fraction = 1.5f;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg = VPTConfig{};
  cfg.kl_cycle_len = 1;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg = VPTConfig{};
  cfg.bn_gamma = 0.0f;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
}

TEST_CASE("kl divergence matches hand-computed values") {
  // identical distributions
  auto q = make_q({0.3f, -1.2f}, {1.0f, 1.0f}, 1);
  Tensor p = Tensor::from_vector({1, 2}, {0.3f, -1.2f});
  CHECK(std::abs(kl_divergence(nullptr, q, p, 1).value()) < 1e-7);

  // unit mean shift, unit sigma, one dimension: exactly 1/2
  q = make_q({1.0f}, {1.0f}, 1);
  p = Tensor::from_vector({1, 1}, {0.0f});
  CHECK(kl_divergence(nullptr, q, p, 1).value() ==
        doctest::Approx(0.5).epsilon(1e-6));

  // equal means, sigma 1/2: 0.5 * (0.25 - 1 - 2 ln 0.5)
  q = make_q({0.7f}, {0.5f}, 1);
  p = Tensor::from_vector({1, 1}, {0.7f});
  CHECK(kl_divergence(nullptr, q, p, 1).value() ==
        doctest::Approx(0.3181471805599453).epsilon(1e-6));

  // mixed two-dimensional case against the double-precision closed form
  q = make_q({0.3f, -0.2f}, {0.8f, 1.3f}, 1);
  p = Tensor::from_vector({1, 2}, {0.1f, 0.4f});
  double want = kl_closed_form({0.3, -0.2}, {0.8, 1.3}, {0.1, 0.4}, 1);
  CHECK(kl_divergence(nullptr, q, p, 1).value() ==
        doctest::Approx(want).epsilon(1e-5));

  // stacked examples: mean over the batch
  q = make_q({0.3f, -0.2f, 1.1f, 0.0f}, {0.8f, 1.3f, 0.6f, 1.7f}, 2);
  p = Tensor::from_vector({2, 2}, {0.1f, 0.4f, -0.3f, 0.2f});
  want = kl_closed_form({0.3, -0.2, 1.1, 0.0}, {0.8, 1.3, 0.6, 1.7},
                        {0.1, 0.4, -0.3, 0.2}, 2);
  CHECK(kl_divergence(nullptr, q, p, 2).value() ==
        doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("kl divergence agrees with a monte carlo estimate") {
  std::vector<double> mu_q{0.3, -0.2}, sigma_q{0.8, 1.3}, mu_p{0.1, 0.4};
  Rng rng(99);
  const int n = 100000;
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    double lq = 0, lp = 0;
    for (int j = 0; j < 2; ++j) {
      double z = mu_q[j] + sigma_q[j] * rng.normal();
      double dq = (z - mu_q[j]) / sigma_q[j];
      lq += -0.5 * dq * dq - std::log(sigma_q[j]);
      double dp = z - mu_p[j];
      lp += -0.5 * dp * dp;
    }
    acc += lq - lp;
  }
  double mc = acc / n;
  auto q = make_q({0.3f, -0.2f}, {0.8f, 1.3f}, 1);
  Tensor p = Tensor::from_vector({1, 2}, {0.1f, 0.4f});
  CHECK(std::abs(kl_divergence(nullptr, q, p, 1).value() - mc) < 1e-2);
}

TEST_CASE("kl divergence is non-negative and rejects bad sigma") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> mu_q(3), sigma_q(3), mu_p(3);
    for (int j = 0; j < 3; ++j) {
      mu_q[j] = static_cast<float>(rng.normal() * 2);
      sigma_q[j] = static_cast<float>(std::exp(rng.normal()));
      mu_p[j] = static_cast<float>(rng.normal() * 2);
    }
    auto q = make_q(mu_q, sigma_q, 1);
    Tensor p = Tensor::from_vector({1, 3}, mu_p);
    CHECK(kl_divergence(nullptr, q, p, 1).value() >= -1e-6);
  }
  auto q = make_q({0.0f}, {0.0f}, 1);
  Tensor p = Tensor::from_vector({1, 1}, {0.0f});
  CHECK_THROWS_AS(kl_divergence(nullptr, q, p, 1), numeric_error);
  q = make_q({0.0f}, {-1.0f}, 1);
  CHECK_THROWS_AS(kl_divergence(nullptr, q, p, 1), numeric_error);
}

TEST_CASE("kl weight follows the cyclic ramp") {
  VPTConfig cfg;
  cfg.kl_cycle_len = 1000;
  cfg.kl_ramp_fraction = 0.5f;
  CHECK(kl_weight(0, cfg) == 0.0);
  CHECK(kl_weight(250, cfg) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(kl_weight(499, cfg) == doctest::Approx(0.998).epsilon(1e-12));
  CHECK(kl_weight(500, cfg) == 1.0);
  CHECK(kl_weight(900, cfg) == 1.0);
  CHECK(kl_weight(999, cfg) == 1.0);
  CHECK(kl_weight(1000, cfg) == 0.0);  // cycle restart
  CHECK(kl_weight(1250, cfg) == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS_AS(kl_weight(-1, cfg), usage_error);
  cfg.kl_cycle_len = 0;  // not yet derived from the run length
  CHECK_THROWS_AS(kl_weight(0, cfg), usage_error);
}

TEST_CASE("reparameterize is exact at sigma zero and propagates gradients") {
  Tensor mu = Tensor::from_vector({1, 3}, {0.4f, -1.0f, 2.5f});
  Tensor zero_sigma = Tensor::zeros({1, 3});
  Rng rng(7);
  Tensor z = reparameterize(nullptr, mu, zero_sigma, rng);
  for (int j = 0; j < 3; ++j) CHECK(z.at(0, j) == mu.at(0, j));

  // recover the noise by replaying the stream, then check dz/dmu = 1 and
  // dz/dsigma = eps through mean_all
  Tensor mu_g = Tensor::from_vector({1, 3}, {0.4f, -1.0f, 2.5f}, true);
  Tensor sigma_g = Tensor::from_vector({1, 3}, {1.0f, 0.5f, 2.0f}, true);
  Tape tape;
  Rng r1(123);
  Tensor zt = reparameterize(&tape, mu_g, sigma_g, r1);
  Rng r2(123);
  std::vector<double> eps(3);
  for (auto& e : eps) e = r2.normal();
  Tensor loss = mean_all(&tape, zt);
  tape.backward(loss);
  for (int j = 0; j < 3; ++j) {
    CHECK((*mu_g.grad)[j] == doctest::Approx(1.0 / 3).epsilon(1e-6));
    CHECK(std::abs((*sigma_g.grad)[j] - eps[j] / 3) < 1e-6);
  }

  Tensor bad = Tensor::zeros({1, 2});
  CHECK_THROWS_AS(reparameterize(nullptr, mu, bad, rng), shape_error);
}

TEST_CASE("reparameterize sample mean converges to mu") {
  Tensor mu = Tensor::from_vector({1, 1}, {0.5f});
  Tensor sigma = Tensor::from_vector({1, 1}, {1.2f});
  Rng rng(17);
  double acc = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    acc += reparameterize(nullptr, mu, sigma, rng).value();
  }
  CHECK(std::abs(acc / n - 0.5) < 4.0 * 1.2 / std::sqrt(double(n)));
}

TEST_CASE("make_summary_pairs expands references and keeps id conventions") {
  const auto& f = fixture();
  CHECK(f.pairs.size() == f.corpus.train.size() * 3);
  const auto& p0 = f.pairs[0];
  CHECK(p0.example_index == 0);
  CHECK(f.pairs[2].example_index == 0);
  CHECK(f.pairs[3].example_index == 1);
  REQUIRE(p0.src.size() >= 3);
  CHECK(p0.src.front() == Vocabulary::kBos);
  CHECK(p0.src.back() == Vocabulary::kEos);
  REQUIRE(!p0.summary.empty());
  for (int id : p0.summary) CHECK(id >= Vocabulary::kSep + 1);
}

TEST_CASE("vpt parameter count matches the architecture arithmetic") {
  const auto& f = fixture();
  const auto& bc = f.model.config();
  VPTConfig vc = tiny_vpt_config();
  VPTModel vpt(f.model, vc, 1);

  int d = bc.d_model, h = vc.hidden_dim, np = vc.n_pool_tokens;
  int64_t pools = 2LL * np * d;
  int64_t trunk = 1LL * d * h + h;
  int64_t heads = 2LL * (h * d + d);  // mu and sigma linear layers
  int64_t bn = 3LL * d;               // mu beta + sigma gamma/beta
  int64_t px = (1LL * d * h + h) + (1LL * h * 2 * bc.n_layers * d +
                                    2LL * bc.n_layers * d);
  CHECK(vpt.param_count() == pools + trunk + heads + bn + px);

  // the fixed-gamma batch norm scale is not a parameter
  for (const auto& p : vpt.params()) {
    CHECK(p.name != "vpt/mu_bn/gamma");
    CHECK(p.tensor->requires_grad);
  }
}

TEST_CASE("default vpt stays under a fifth of the backbone size") {
  const auto& f = fixture();
  BackboneConfig bc;  // defaults: d 64, 2 layers, 4 heads, ff 256
  bc.vocab_size = f.vocab.size();
  Backbone big(bc, 2);
  VPTModel vpt(big, VPTConfig{}, 1);
  double ratio = static_cast<double>(vpt.param_count()) /
                 static_cast<double>(big.param_count());
  CHECK(ratio < 0.20);
  CHECK(vpt.param_count() == 33728);
}

TEST_CASE("prior forward is deterministic and batches by stacking") {
  const auto& f = fixture();
  VPTModel vpt(f.model, tiny_vpt_config(), 1);
  int np = vpt.config().n_pool_tokens;

  Tensor a = vpt.prior_forward(nullptr, f.pairs[0].src);
  Tensor b = vpt.prior_forward(nullptr, f.pairs[0].src);
  CHECK((a.shape == Shape{np, f.model.config().d_model}));
  CHECK(max_abs_diff(a, b) == 0.0);

  auto batch = take_pairs(f.pairs, 3);
  Tensor stacked = vpt.prior_forward_batch(nullptr, batch);
  CHECK(stacked.shape[0] == 3 * np);
  for (int i = 0; i < 3; ++i) {
    Tensor one = vpt.prior_forward(nullptr, batch[i]->src);
    Tensor block = slice_rows(static_cast<Tape*>(nullptr), stacked, i * np, np);
    CHECK(max_abs_diff(one, block) == 0.0);
  }
}

TEST_CASE("posterior sigma is strictly positive across seeds") {
  const auto& f = fixture();
  for (uint64_t seed = 0; seed < 20; ++seed) {
    VPTModel vpt(f.model, tiny_vpt_config(), seed);
    auto batch = take_pairs(f.pairs, 3, static_cast<int>(seed % 8));
    PosteriorOutput train_q = vpt.posterior_forward(nullptr, batch, true);
    PosteriorOutput eval_q = vpt.posterior_forward(nullptr, batch, false);
    for (const auto* q : {&train_q, &eval_q}) {
      CHECK(q->sigma.all_finite());
      for (float s : *q->sigma.data) CHECK(s >= 1e-4f);
    }
  }
}

TEST_CASE("posterior mean batch norm pins batch statistics") {
  const auto& f = fixture();
  VPTModel vpt(f.model, tiny_vpt_config(), 4);
  auto batch = take_pairs(f.pairs, 32);
  PosteriorOutput q = vpt.posterior_forward(nullptr, batch, true);
  int rows = q.mu.shape[0], cols = q.mu.shape[1];
  REQUIRE(rows == 32 * vpt.config().n_pool_tokens);
  for (int j = 0; j < cols; ++j) {
    double mean = 0;
    for (int i = 0; i < rows; ++i) mean += q.mu.at(i, j);
    mean /= rows;
    double var = 0;
    for (int i = 0; i < rows; ++i) {
      double d = q.mu.at(i, j) - mean;
      var += d * d;
    }
    double sd = std::sqrt(var / rows);
    CHECK(std::abs(mean) < 1e-4);  // beta starts at zero
    CHECK(sd == doctest::Approx(vpt.config().bn_gamma).epsilon(0.02));
  }
}

TEST_CASE("posterior eval output is independent of batch peers") {
  const auto& f = fixture();
  VPTModel vpt(f.model, tiny_vpt_config(), 4);
  // a few training passes so the running statistics are non-trivial
  for (int i = 0; i < 3; ++i) {
    vpt.posterior_forward(nullptr, take_pairs(f.pairs, 8, i * 8), true);
  }
  int np = vpt.config().n_pool_tokens;
  auto alone = take_pairs(f.pairs, 1);
  auto with_peers = take_pairs(f.pairs, 5);
  PosteriorOutput qa = vpt.posterior_forward(nullptr, alone, false);
  PosteriorOutput qb = vpt.posterior_forward(nullptr, with_peers, false);
  Tensor mu_b = slice_rows(static_cast<Tape*>(nullptr), qb.mu, 0, np);
  Tensor sig_b = slice_rows(static_cast<Tape*>(nullptr), qb.sigma, 0, np);
  CHECK(max_abs_diff(qa.mu, mu_b) < 1e-7);
  CHECK(max_abs_diff(qa.sigma, sig_b) < 1e-7);
}

TEST_CASE("posterior rejects empty summaries, accepts overlong ones") {
  const auto& f = fixture();
  VPTModel vpt(f.model, tiny_vpt_config(), 4);

  SummaryPair empty = f.pairs[0];
  empty.summary.clear();
  std::vector<const SummaryPair*> batch{&empty};
  CHECK_THROWS_AS(vpt.posterior_forward(nullptr, batch, false), usage_error);

  SummaryPair overlong = f.pairs[0];
  while (overlong.summary.size() < 200) {
    overlong.summary.insert(overlong.summary.end(), f.pairs[0].summary.begin(),
                            f.pairs[0].summary.end());
  }
  std::vector<const SummaryPair*> batch2{&overlong, &overlong};
  PosteriorOutput q = vpt.posterior_forward(nullptr, batch2, true);
  CHECK((q.mu.shape ==
         Shape{2 * vpt.config().n_pool_tokens, f.model.config().d_model}));
  CHECK(q.mu.all_finite());
}

TEST_CASE("z_to_prefix emits the full per-layer per-head layout") {
  const auto& f = fixture();
  const auto& bc = f.model.config();
  VPTModel vpt(f.model, tiny_vpt_config(), 1);
  int np = vpt.config().n_pool_tokens;

  Tensor z = Tensor::zeros({np, bc.d_model});
  for (int64_t i = 0; i < z.numel(); ++i) {
    (*z.data)[i] = 0.1f * static_cast<float>(i % 7) - 0.3f;
  }
  AttentionPrefix p = vpt.z_to_prefix(nullptr, z);
  CHECK(p.prefix_len == np);
  REQUIRE(static_cast<int>(p.kv.size()) == bc.n_layers);
  for (const auto& layer : p.kv) {
    for (const auto& side : layer) {
      REQUIRE(static_cast<int>(side.size()) == bc.n_heads);
      for (const auto& t : side) CHECK((t.shape == Shape{np, bc.d_k()}));
    }
  }
  CHECK_NOTHROW(p.validate(bc));

  AttentionPrefix p2 = vpt.z_to_prefix(nullptr, z);
  double diff = 0;
  for (int l = 0; l < bc.n_layers; ++l) {
    for (int s = 0; s < 2; ++s) {
      for (int h = 0; h < bc.n_heads; ++h) {
        diff = std::max(diff, max_abs_diff(p.kv[l][s][h], p2.kv[l][s][h]));
      }
    }
  }
  CHECK(diff == 0.0);

  Tensor z2 = Tensor::full({np, bc.d_model}, 1.0f);
  AttentionPrefix p3 = vpt.z_to_prefix(nullptr, z2);
  CHECK(max_abs_diff(p.kv[0][0][0], p3.kv[0][0][0]) > 1e-6);

  Tensor bad = Tensor::zeros({np + 1, bc.d_model});
  CHECK_THROWS_AS(vpt.z_to_prefix(nullptr, bad), shape_error);
}

TEST_CASE("train step composes the objective and respects the freeze") {
  const auto& f = fixture();
  Backbone model(tiny_config(f.vocab.size()), 3);
  model.set_trainable(false);
  VPTModel vpt(model, tiny_vpt_config(), 6);
  vpt.set_kl_cycle_len(1000);
  auto batch = take_pairs(f.pairs, 2);
  Rng rng(21);

  SUBCASE("zero kl weight means total equals reconstruction") {
    Tape tape;
    VptLossParts parts = vpt.vpt_train_step(&tape, batch, 0, rng);
    CHECK(parts.weight == 0.0);
    CHECK(static_cast<double>(parts.total.value()) == parts.recon);
    CHECK(parts.kl > 0.0);
    tape.clear();
  }

  SUBCASE("unit kl weight means total equals recon plus kl") {
    Tape tape;
    VptLossParts parts = vpt.vpt_train_step(&tape, batch, 500, rng);
    CHECK(parts.weight == 1.0);
    CHECK(std::abs(static_cast<double>(parts.total.value()) -
                   (parts.recon + parts.kl)) < 1e-6);
    tape.clear();
  }

  SUBCASE("initial reconstruction sits near the prefix-free loss") {
    Tape tape;
    VptLossParts parts = vpt.vpt_train_step(&tape, batch, 0, rng);
    tape.clear();
    double base = 0;
    for (const auto* p : batch) {
      auto enc = model.encode(nullptr, p->src);
      std::vector<int> dec_in{Vocabulary::kBos};
      dec_in.insert(dec_in.end(), p->summary.begin(), p->summary.end());
      std::vector<int> targets = p->summary;
      targets.push_back(Vocabulary::kEos);
      Tensor logits = model.decoder_forward(nullptr, enc, dec_in);
      base += cross_entropy(static_cast<Tape*>(nullptr), logits, targets,
                            Vocabulary::kPad)
                  .value();
    }
    base /= batch.size();
    CHECK(parts.recon == doctest::Approx(base).epsilon(0.10));
  }

  SUBCASE("gradients reach every vpt block and no backbone tensor") {
    Tape tape;
    VptLossParts parts = vpt.vpt_train_step(&tape, batch, 500, rng);
    tape.backward(parts.total);
    ParamList params = vpt.params();
    for (const char* name :
         {"vpt/prior_pool", "vpt/post_pool", "vpt/trunk/w", "vpt/mu/w",
          "vpt/sigma/w", "vpt/mu_bn/beta", "vpt/prefix/w1", "vpt/prefix/w2"}) {
      CHECK(grad_l1(params, name) > 0.0);
    }
    for (const auto& p : model.params()) {
      CHECK_FALSE(p.tensor->requires_grad);
      if (p.tensor->grad) {
        for (float g : *p.tensor->grad) CHECK(g == 0.0f);
      }
    }
    CHECK_THROWS_AS(
        vpt.vpt_train_step(&tape, std::vector<const SummaryPair*>{}, 0, rng),
        usage_error);
    tape.clear();
  }
}

TEST_CASE("an adam step on vpt params leaves the backbone untouched") {
  const auto& f = fixture();
  Backbone model(tiny_config(f.vocab.size()), 3);
  model.set_trainable(false);
  uint64_t before = model.param_fingerprint();
  VPTModel vpt(model, tiny_vpt_config(), 6);
  vpt.set_kl_cycle_len(100);
  uint64_t vpt_before = vpt.param_fingerprint();

  Tape tape;
  Rng rng(21);
  VptLossParts parts = vpt.vpt_train_step(&tape, take_pairs(f.pairs, 2), 50, rng);
  tape.backward(parts.total);
  Adam opt({1e-3});
  ParamList params = vpt.params();
  opt.step(params);
  opt.zero_grad(params);

  CHECK(model.param_fingerprint() == before);
  CHECK(vpt.param_fingerprint() != vpt_before);
}

TEST_CASE("sample_prior draws centered on the prior mean") {
  const auto& f = fixture();
  VPTModel vpt(f.model, tiny_vpt_config(), 1);
  const auto& src = f.pairs[0].src;
  Tensor mu = vpt.prior_forward(nullptr, src);

  Rng rng(31);
  auto exact = vpt.sample_prior(src, 0.0f, rng, 1);
  CHECK(max_abs_diff(exact[0].z, mu) == 0.0);

  auto nearly = vpt.sample_prior(src, 1e-12f, rng, 3);
  REQUIRE(nearly.size() == 3);
  for (const auto& s : nearly) {
    CHECK(max_abs_diff(s.z, mu) < 1e-9);
    CHECK((s.source == LatentSource::prior));
    CHECK(s.prefix.prefix_len == vpt.config().n_pool_tokens);
    CHECK_NOTHROW(s.prefix.validate(f.model.config()));
  }

  const float tau = 0.37f;
  auto many = vpt.sample_prior(src, tau, rng, 2000);
  REQUIRE(many.size() == 2000);
  double ss = 0;
  int64_t n = 0;
  for (const auto& s : many) {
    for (int64_t i = 0; i < s.z.numel(); ++i) {
      double d = (*s.z.data)[i] - (*mu.data)[i];
      ss += d * d;
      ++n;
    }
  }
  double sd = std::sqrt(ss / n);
  CHECK(sd > tau * 0.95);
  CHECK(sd < tau * 1.05);

  CHECK_THROWS_AS(vpt.sample_prior(src, -0.1f, rng, 1), usage_error);
  CHECK_THROWS_AS(vpt.sample_prior(src, 1.0f, rng, 0), usage_error);
}

TEST_CASE("distinct latents produce distinct prefixes") {
  const auto& f = fixture();
  VPTModel vpt(f.model, tiny_vpt_config(), 1);
  Rng rng(41);
  auto samples = vpt.sample_prior(f.pairs[0].src, 1.0f, rng, 4);
  for (size_t a = 0; a < samples.size(); ++a) {
    for (size_t b = a + 1; b < samples.size(); ++b) {
      CHECK(max_abs_diff(samples[a].prefix.kv[0][0][0],
                         samples[b].prefix.kv[0][0][0]) > 1e-6);
    }
  }
}

TEST_CASE("vpt training trains only the adapter and reports curves") {
  const auto& f = fixture();
  Backbone model(tiny_config(f.vocab.size()), 3);
  uint64_t backbone_before = model.param_fingerprint();

  VPTModel vpt(model, tiny_vpt_config(), 6);
  std::vector<Example> small(f.corpus.train.begin(), f.corpus.train.begin() + 4);
  VptTrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 6;
  cfg.lr = 1e-3;
  cfg.seed = 9;
  VptTrainResult result = train_vpt(model, vpt, small, f.vocab, cfg);

  // 12 pairs, batches of 6: two steps per epoch
  CHECK(result.steps_run == 12);
  CHECK(vpt.config().kl_cycle_len == 3);  // derived: 12 steps over 4 cycles
  REQUIRE(result.recon_curve.size() == 6);
  REQUIRE(result.kl_curve.size() == 6);
  for (double v : result.recon_curve) CHECK(std::isfinite(v));
  for (double v : result.kl_curve) CHECK(v >= 0.0);
  CHECK(result.recon_curve.back() < result.recon_curve.front());
  CHECK(model.param_fingerprint() == backbone_before);

  VptEvalStats stats = eval_vpt(model, vpt, small, f.vocab);
  CHECK(std::isfinite(stats.mean_recon));
  CHECK(stats.mean_kl >= 0.0);

  CHECK_THROWS_AS(train_vpt(model, vpt, {}, f.vocab, cfg), usage_error);
}

TEST_CASE("vpt checkpoint round trip is byte-identical") {
  const auto& f = fixture();
  fs::path dir = fs::temp_directory_path() / "vpt_ckpt_test";
  fs::create_directories(dir);
  std::string path = (dir / "joint.ckpt").string();
  std::string path2 = (dir / "joint2.ckpt").string();

  Backbone model(tiny_config(f.vocab.size()), 3);
  model.set_trainable(false);
  VPTModel vpt(model, tiny_vpt_config(), 6);
  vpt.set_kl_cycle_len(64);
  // move the batch-norm running statistics off their initial values
  for (int i = 0; i < 4; ++i) {
    vpt.posterior_forward(nullptr, take_pairs(f.pairs, 8, i), true);
  }

  CheckpointData data;
  model.append_to(data);
  vpt.append_to(data);
  save_checkpoint(path, data);

  CheckpointData loaded = load_checkpoint(path);
  Backbone model2 = Backbone::load(loaded);
  VPTModel vpt2 = VPTModel::load(loaded, model2);
  CHECK(vpt2.param_fingerprint() == vpt.param_fingerprint());
  CHECK(vpt2.config().kl_cycle_len == 64);
  CHECK(vpt2.config().hidden_dim == vpt.config().hidden_dim);

  // eval-mode posteriors exercise the restored running statistics
  auto batch = take_pairs(f.pairs, 3);
  PosteriorOutput qa = vpt.posterior_forward(nullptr, batch, false);
  PosteriorOutput qb = vpt2.posterior_forward(nullptr, batch, false);
  CHECK(max_abs_diff(qa.mu, qb.mu) == 0.0);
  CHECK(max_abs_diff(qa.sigma, qb.sigma) == 0.0);

  CheckpointData data2;
  model2.append_to(data2);
  vpt2.append_to(data2);
  save_checkpoint(path2, data2);
  CHECK(read_file(path) == read_file(path2));

  CheckpointData broken = loaded;
  broken.tensors.erase("vpt/mu/w");
  CHECK_THROWS_AS(VPTModel::load(broken, model2), data_error);
}

TEST_CASE("trainable posterior attention path works end to end") {
  const auto& f = fixture();
  Backbone model(tiny_config(f.vocab.size()), 3);
  model.set_trainable(false);

  VPTConfig cfg = tiny_vpt_config();
  cfg.trainable_posterior_attention = true;
  VPTModel vpt(model, cfg, 6);

  VPTModel plain(model, tiny_vpt_config(), 6);
  CHECK(vpt.param_count() > plain.param_count());

  Tape tape;
  auto batch = take_pairs(f.pairs, 2);
  PosteriorOutput q = vpt.posterior_forward(&tape, batch, true);
  CHECK(q.mu.all_finite());
  Tensor loss = mean_all(&tape, mul(&tape, q.mu, q.mu));
  tape.backward(loss);
  CHECK(grad_l1(vpt.params(), "vpt/post_attn/wq") > 0.0);
  CHECK(grad_l1(vpt.params(), "vpt/post_pool") > 0.0);
}
