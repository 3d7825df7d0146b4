#include "vpt/vpt_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <numeric>

#include "vpt/adam.hpp"
#include "vpt/errors.hpp"

namespace vptlab {
namespace {

constexpr float kSigmaFloor = 1e-4f;

Tensor glorot_param(const Shape& shape, Rng& rng) {
  Tensor t = Tensor::zeros(shape, true);
  init_glorot(t, rng);
  return t;
}

Tensor pool_param(int n_pool, int d, Rng& rng) {
  Tensor t = Tensor::zeros({n_pool, d}, true);
  init_normal(t, rng, 0.02);
  return t;
}

}  // namespace

void VPTConfig::validate() const {
  if (n_pool_tokens < 1) throw usage_error("VPTConfig: n_pool_tokens must be >= 1");
  if (hidden_dim < 1) throw usage_error("VPTConfig: hidden_dim must be >= 1");
  if (!(prior_sigma_train > 0)) {
    throw usage_error("VPTConfig: prior_sigma_train must be positive");
  }
  if (!(inference_sigma_scale > 0)) {
    throw usage_error("VPTConfig: inference_sigma_scale must be positive");
  }
  if (!(kl_ramp_fraction > 0) || kl_ramp_fraction > 1) {
    throw usage_error("VPTConfig: kl_ramp_fraction must be in (0, 1]");
  }
  if (kl_cycle_len != 0 && kl_cycle_len < 2) {
    throw usage_error("VPTConfig: kl_cycle_len must be 0 (derive) or >= 2");
  }
  if (!(bn_gamma > 0)) throw usage_error("VPTConfig: bn_gamma must be positive");
}

std::vector<SummaryPair> make_summary_pairs(const std::vector<Example>& split,
                                            const Vocabulary& vocab,
                                            int max_len) {
  std::vector<SummaryPair> pairs;
  for (size_t i = 0; i < split.size(); ++i) {
    auto src = to_source_ids(vocab, split[i].code, max_len);
    for (const auto& ref : split[i].refs) {
      SummaryPair p;
      p.example_index = static_cast<int>(i);
      p.src = src;
      p.summary = vocab.encode(ref);
      if (static_cast<int>(p.summary.size()) + 1 > max_len) {
        p.summary.resize(max_len - 1);
      }
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

double kl_weight(int64_t step, const VPTConfig& cfg) {
  if (step < 0) throw usage_error("kl_weight: step must be >= 0");
  if (cfg.kl_cycle_len < 2) {
    throw usage_error("kl_weight: kl_cycle_len not yet derived");
  }
  double pos = static_cast<double>(step % cfg.kl_cycle_len);
  double ramp = cfg.kl_ramp_fraction * cfg.kl_cycle_len;
  return std::min(1.0, pos / ramp);
}

Tensor reparameterize(Tape* tape, const Tensor& mu, const Tensor& sigma,
                      Rng& rng) {
  if (mu.shape != sigma.shape) {
    throw shape_error("reparameterize: mu/sigma shape mismatch");
  }
  Tensor eps = Tensor::zeros(mu.shape);
  for (auto& v : *eps.data) v = static_cast<float>(rng.normal());
  return add(tape, mu, mul(tape, sigma, eps));
}

Tensor kl_divergence(Tape* tape, const PosteriorOutput& q,
                     const Tensor& prior_mu, int n_examples) {
  return kl_gaussian(tape, q.mu, q.sigma, prior_mu, n_examples);
}

VPTModel::VPTModel(const Backbone& backbone, VPTConfig cfg, uint64_t seed)
    : backbone_(&backbone), cfg_(cfg) {
  cfg_.validate();
  const auto& bc = backbone.config();
  int d = bc.d_model;
  int h = cfg_.hidden_dim;
  Rng rng(seed);

  prior_pool_ = pool_param(cfg_.n_pool_tokens, d, rng);
  post_pool_ = pool_param(cfg_.n_pool_tokens, d, rng);

  trunk_w_ = glorot_param({d, h}, rng);
  trunk_b_ = Tensor::zeros({1, h}, true);
  mu_w_ = glorot_param({h, d}, rng);
  mu_b_ = Tensor::zeros({1, d}, true);
  sigma_w_ = glorot_param({h, d}, rng);
  sigma_b_ = Tensor::zeros({1, d}, true);

  mu_bn_gamma_ = Tensor::full({1, d}, cfg_.bn_gamma);  // fixed, never trains
  mu_bn_beta_ = Tensor::zeros({1, d}, true);
  sigma_bn_gamma_ = Tensor::full({1, d}, 1.0f, true);
  sigma_bn_beta_ = Tensor::zeros({1, d}, true);
  mu_bn_state_ = BatchNormState(d);
  sigma_bn_state_ = BatchNormState(d);

  px_w1_ = glorot_param({d, h}, rng);
  px_b1_ = Tensor::zeros({1, h}, true);
  px_w2_ = glorot_param({h, 2 * bc.n_layers * d}, rng);
  px_b2_ = Tensor::zeros({1, 2 * bc.n_layers * d}, true);

  if (cfg_.trainable_posterior_attention) {
    auto attn_w = [&](Tensor& t) { t = glorot_param({d, d}, rng); };
    attn_w(post_attn_.wq);
    attn_w(post_attn_.wk);
    attn_w(post_attn_.wv);
    attn_w(post_attn_.wo);
    for (Tensor* b : {&post_attn_.bq, &post_attn_.bk, &post_attn_.bv,
                      &post_attn_.bo}) {
      *b = Tensor::zeros({1, d}, true);
    }
    post_attn_ln_ = {Tensor::full({1, d}, 1.0f, true),
                     Tensor::zeros({1, d}, true)};
  }
}

void VPTModel::visit_params(
    const std::function<void(const std::string&, Tensor&)>& fn) const {
  auto* self = const_cast<VPTModel*>(this);
  fn("vpt/prior_pool", self->prior_pool_);
  fn("vpt/post_pool", self->post_pool_);
  fn("vpt/trunk/w", self->trunk_w_);
  fn("vpt/trunk/b", self->trunk_b_);
  fn("vpt/mu/w", self->mu_w_);
  fn("vpt/mu/b", self->mu_b_);
  fn("vpt/mu_bn/beta", self->mu_bn_beta_);
  fn("vpt/sigma/w", self->sigma_w_);
  fn("vpt/sigma/b", self->sigma_b_);
  fn("vpt/sigma_bn/gamma", self->sigma_bn_gamma_);
  fn("vpt/sigma_bn/beta", self->sigma_bn_beta_);
  fn("vpt/prefix/w1", self->px_w1_);
  fn("vpt/prefix/b1", self->px_b1_);
  fn("vpt/prefix/w2", self->px_w2_);
  fn("vpt/prefix/b2", self->px_b2_);
  if (cfg_.trainable_posterior_attention) {
    fn("vpt/post_attn/wq", self->post_attn_.wq);
    fn("vpt/post_attn/wk", self->post_attn_.wk);
    fn("vpt/post_attn/wv", self->post_attn_.wv);
    fn("vpt/post_attn/wo", self->post_attn_.wo);
    fn("vpt/post_attn/bq", self->post_attn_.bq);
    fn("vpt/post_attn/bk", self->post_attn_.bk);
    fn("vpt/post_attn/bv", self->post_attn_.bv);
    fn("vpt/post_attn/bo", self->post_attn_.bo);
    fn("vpt/post_attn_ln/g", self->post_attn_ln_.g);
    fn("vpt/post_attn_ln/b", self->post_attn_ln_.b);
  }
}

ParamList VPTModel::params() const {
  ParamList list;
  visit_params([&](const std::string& name, Tensor& t) {
    list.push_back({name, &t});
  });
  return list;
}

std::vector<std::pair<std::string, Tensor>> VPTModel::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  visit_params([&](const std::string& name, Tensor& t) {
    out.emplace_back(name, t);
  });
  return out;
}

int64_t VPTModel::param_count() const {
  int64_t n = 0;
  visit_params([&](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

uint64_t VPTModel::param_fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  visit_params([&](const std::string&, Tensor& t) {
    for (float v : *t.data) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      for (int s = 0; s < 32; s += 8) {
        h ^= (bits >> s) & 0xFF;
        h *= 0x100000001b3ULL;
      }
    }
  });
  return h;
}

Tensor VPTModel::prior_forward(Tape* tape,
                               const std::vector<int>& src_ids) const {
  auto enc = backbone_->encode_with_lead(tape, prior_pool_, src_ids);
  return slice_rows(tape, enc.values, 0, cfg_.n_pool_tokens);
}

Tensor VPTModel::prior_forward_batch(
    Tape* tape, const std::vector<const SummaryPair*>& batch) const {
  Tensor out;
  for (const SummaryPair* p : batch) {
    Tensor mu = prior_forward(tape, p->src);
    out = out.data ? concat_rows(tape, out, mu) : mu;
  }
  return out;
}

ContextualEmbeddings VPTModel::posterior_encode(
    Tape* tape, const Tensor& lead, const std::vector<int>& ids) const {
  if (!cfg_.trainable_posterior_attention) {
    return backbone_->encode_with_lead(tape, lead, ids);
  }
  // single trainable attention layer over frozen token embeddings, for
  // backbones whose encoder never saw code and summary in one sequence
  int d = backbone_->config().d_model;
  Tensor tok = embedding_rows(tape, backbone_->embedding(), ids);
  tok = scale(tape, tok, std::sqrt(static_cast<float>(d)));
  Tensor x = concat_rows(tape, lead, tok);
  Tensor pe = slice_rows(static_cast<Tape*>(nullptr),
                         backbone_->positional_encoding(), 0, x.shape[0]);
  x = add(tape, x, pe);
  Tensor h = layer_norm(tape, x, post_attn_ln_.g, post_attn_ln_.b);
  Tensor a = backbone_->mha(tape, post_attn_, h, h, false, nullptr, nullptr);
  x = add(tape, x, a);
  return {x, std::vector<uint8_t>(x.shape[0], 1)};
}

std::vector<int> VPTModel::posterior_ids(const SummaryPair& pair) const {
  if (pair.summary.empty()) {
    throw usage_error("posterior_forward: empty summary for pair of example " +
                      std::to_string(pair.example_index));
  }
  int max_len = backbone_->config().max_len;
  std::vector<int> ids = pair.src;
  if (!ids.empty() && ids.back() == Vocabulary::kEos) ids.pop_back();
  ids.push_back(Vocabulary::kSep);
  // truncate the summary first when the concatenation would not fit
  int budget = max_len - cfg_.n_pool_tokens - static_cast<int>(ids.size()) - 1;
  int take = std::min<int>(static_cast<int>(pair.summary.size()),
                           std::max(0, budget));
  ids.insert(ids.end(), pair.summary.begin(), pair.summary.begin() + take);
  ids.push_back(Vocabulary::kEos);
  return ids;
}

PosteriorOutput VPTModel::posterior_forward(
    Tape* tape, const std::vector<const SummaryPair*>& batch, bool train) {
  if (batch.empty()) throw usage_error("posterior_forward: empty batch");
  Tensor pooled;
  for (const SummaryPair* p : batch) {
    auto enc = posterior_encode(tape, post_pool_, posterior_ids(*p));
    Tensor rows = slice_rows(tape, enc.values, 0, cfg_.n_pool_tokens);
    pooled = pooled.data ? concat_rows(tape, pooled, rows) : rows;
  }
  Tensor h = gelu(tape, add_bias(tape, matmul(tape, pooled, trunk_w_), trunk_b_));

  Tensor mu_pre = add_bias(tape, matmul(tape, h, mu_w_), mu_b_);
  Tensor mu = batch_norm(tape, mu_pre, mu_bn_gamma_, mu_bn_beta_,
                         mu_bn_state_, train);

  Tensor sig_pre = add_bias(tape, matmul(tape, h, sigma_w_), sigma_b_);
  Tensor sig_bn = batch_norm(tape, sig_pre, sigma_bn_gamma_, sigma_bn_beta_,
                             sigma_bn_state_, train);
  Tensor sigma = add(tape, softplus(tape, sig_bn),
                     Tensor::full(sig_bn.shape, kSigmaFloor));
  return {mu, sigma};
}

AttentionPrefix VPTModel::z_to_prefix(Tape* tape, const Tensor& z) const {
  const auto& bc = backbone_->config();
  if (z.shape != Shape{cfg_.n_pool_tokens, bc.d_model}) {
    throw shape_error("z_to_prefix: z shape " + shape_str(z.shape) +
                      " != [" + std::to_string(cfg_.n_pool_tokens) + "x" +
                      std::to_string(bc.d_model) + "]");
  }
  Tensor h = gelu(tape, add_bias(tape, matmul(tape, z, px_w1_), px_b1_));
  Tensor flat = add_bias(tape, matmul(tape, h, px_w2_), px_b2_);

  AttentionPrefix prefix;
  prefix.prefix_len = cfg_.n_pool_tokens;
  prefix.kv.resize(bc.n_layers);
  int d = bc.d_model, dk = bc.d_k();
  for (int l = 0; l < bc.n_layers; ++l) {
    for (int s = 0; s < 2; ++s) {
      for (int head = 0; head < bc.n_heads; ++head) {
        int col = (l * 2 + s) * d + head * dk;
        prefix.kv[l][s].push_back(slice_cols(tape, flat, col, dk));
      }
    }
  }
  return prefix;
}

VptLossParts VPTModel::vpt_train_step(
    Tape* tape, const std::vector<const SummaryPair*>& batch, int64_t step,
    Rng& rng) {
  if (batch.empty()) throw usage_error("vpt_train_step: empty batch");
  int b = static_cast<int>(batch.size());
  int n_pool = cfg_.n_pool_tokens;

  PosteriorOutput q = posterior_forward(tape, batch, true);
  Tensor prior_mu = prior_forward_batch(tape, batch);

  Tensor recon_sum;
  for (int i = 0; i < b; ++i) {
    const SummaryPair& p = *batch[i];
    Tensor mu_i = slice_rows(tape, q.mu, i * n_pool, n_pool);
    Tensor sigma_i = slice_rows(tape, q.sigma, i * n_pool, n_pool);
    Tensor z = reparameterize(tape, mu_i, sigma_i, rng);
    AttentionPrefix prefix = z_to_prefix(tape, z);

    auto enc = backbone_->encode(tape, p.src);
    std::vector<int> dec_in{Vocabulary::kBos};
    dec_in.insert(dec_in.end(), p.summary.begin(), p.summary.end());
    std::vector<int> targets = p.summary;
    targets.push_back(Vocabulary::kEos);
    Tensor logits = backbone_->decoder_forward(tape, enc, dec_in, &prefix);
    Tensor ce = cross_entropy(tape, logits, targets, Vocabulary::kPad);
    recon_sum = recon_sum.data ? add(tape, recon_sum, ce) : ce;
  }
  Tensor recon = scale(tape, recon_sum, 1.0f / static_cast<float>(b));
  Tensor kl = kl_divergence(tape, q, prior_mu, b);
  double w = kl_weight(step, cfg_);

  VptLossParts parts;
  parts.recon = recon.value();
  parts.kl = kl.value();
  parts.weight = w;
  parts.total = add(tape, recon, scale(tape, kl, static_cast<float>(w)));
  return parts;
}

std::vector<LatentSample> VPTModel::sample_prior(
    const std::vector<int>& src_ids, float tau, Rng& rng, int n) const {
  if (!(tau >= 0)) throw usage_error("sample_prior: tau must be >= 0");
  if (n < 1) throw usage_error("sample_prior: n must be >= 1");
  Tensor mu = prior_forward(nullptr, src_ids);
  std::vector<LatentSample> samples;
  samples.reserve(n);
  for (int i = 0; i < n; ++i) {
    Tensor z = Tensor::zeros(mu.shape);
    for (int64_t j = 0; j < mu.numel(); ++j) {
      (*z.data)[j] = (*mu.data)[j] + tau * static_cast<float>(rng.normal());
    }
    LatentSample s;
    s.z = z;
    s.source = LatentSource::prior;
    s.prefix = z_to_prefix(nullptr, z);
    samples.push_back(std::move(s));
  }
  return samples;
}

void VPTModel::append_to(CheckpointData& data) const {
  data.meta["vpt.n_pool_tokens"] = std::to_string(cfg_.n_pool_tokens);
  data.meta["vpt.hidden_dim"] = std::to_string(cfg_.hidden_dim);
  data.meta["vpt.prior_sigma_train"] = std::to_string(cfg_.prior_sigma_train);
  data.meta["vpt.kl_cycle_len"] = std::to_string(cfg_.kl_cycle_len);
  data.meta["vpt.kl_ramp_fraction"] = std::to_string(cfg_.kl_ramp_fraction);
  data.meta["vpt.bn_gamma"] = std::to_string(cfg_.bn_gamma);
  data.meta["vpt.trainable_posterior_attention"] =
      cfg_.trainable_posterior_attention ? "1" : "0";
  data.meta["vpt.mu_bn_updates"] = std::to_string(mu_bn_state_.updates);
  data.meta["vpt.sigma_bn_updates"] = std::to_string(sigma_bn_state_.updates);
  visit_params([&](const std::string& name, Tensor& t) {
    data.tensors[name] = {t.shape, *t.data};
  });
  int d = backbone_->config().d_model;
  data.tensors["vpt/mu_bn/running_mean"] = {{1, d}, mu_bn_state_.running_mean};
  data.tensors["vpt/mu_bn/running_var"] = {{1, d}, mu_bn_state_.running_var};
  data.tensors["vpt/sigma_bn/running_mean"] = {{1, d},
                                               sigma_bn_state_.running_mean};
  data.tensors["vpt/sigma_bn/running_var"] = {{1, d},
                                              sigma_bn_state_.running_var};
}

VPTModel VPTModel::load(const CheckpointData& data, const Backbone& backbone) {
  auto meta = [&](const std::string& key) -> const std::string& {
    auto it = data.meta.find(key);
    if (it == data.meta.end()) {
      throw data_error("VPTModel::load: missing meta key " + key);
    }
    return it->second;
  };
  VPTConfig cfg;
  cfg.n_pool_tokens = std::stoi(meta("vpt.n_pool_tokens"));
  cfg.hidden_dim = std::stoi(meta("vpt.hidden_dim"));
  cfg.prior_sigma_train = std::stof(meta("vpt.prior_sigma_train"));
  cfg.kl_cycle_len = std::stoi(meta("vpt.kl_cycle_len"));
  cfg.kl_ramp_fraction = std::stof(meta("vpt.kl_ramp_fraction"));
  cfg.bn_gamma = std::stof(meta("vpt.bn_gamma"));
  cfg.trainable_posterior_attention =
      meta("vpt.trainable_posterior_attention") == "1";

  VPTModel model(backbone, cfg, 0);
  model.visit_params([&](const std::string& name, Tensor& t) {
    auto it = data.tensors.find(name);
    if (it == data.tensors.end()) {
      throw data_error("VPTModel::load: checkpoint missing tensor " + name);
    }
    if (it->second.first != t.shape) {
      throw shape_error("VPTModel::load: shape mismatch for " + name);
    }
    *t.data = it->second.second;
  });
  auto stats = [&](const std::string& name) -> const std::vector<float>& {
    auto it = data.tensors.find(name);
    if (it == data.tensors.end()) {
      throw data_error("VPTModel::load: checkpoint missing tensor " + name);
    }
    return it->second.second;
  };
  model.mu_bn_state_.running_mean = stats("vpt/mu_bn/running_mean");
  model.mu_bn_state_.running_var = stats("vpt/mu_bn/running_var");
  model.sigma_bn_state_.running_mean = stats("vpt/sigma_bn/running_mean");
  model.sigma_bn_state_.running_var = stats("vpt/sigma_bn/running_var");
  model.mu_bn_state_.updates = std::stoll(meta("vpt.mu_bn_updates"));
  model.sigma_bn_state_.updates = std::stoll(meta("vpt.sigma_bn_updates"));
  return model;
}

VptTrainResult train_vpt(Backbone& backbone, VPTModel& vpt,
                         const std::vector<Example>& train,
                         const Vocabulary& vocab, const VptTrainConfig& cfg) {
  if (train.empty()) throw usage_error("train_vpt: empty training split");
  backbone.set_trainable(false);
  auto pairs = make_summary_pairs(train, vocab, backbone.config().max_len);

  int64_t steps_per_epoch =
      (static_cast<int64_t>(pairs.size()) + cfg.batch_size - 1) /
      cfg.batch_size;
  int64_t total_steps = steps_per_epoch * cfg.epochs;
  if (vpt.config().kl_cycle_len == 0) {
    vpt.set_kl_cycle_len(
        std::max<int64_t>(2, total_steps / 4));  // four annealing cycles
  }

  Rng rng(cfg.seed);
  Rng sample_rng = rng.fork(1);
  Adam opt({cfg.lr});
  ParamList params = vpt.params();

  std::vector<int> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  VptTrainResult result;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.randint(static_cast<int>(i))]);
    }
    double recon_sum = 0, kl_sum = 0;
    int n_batches = 0;
    Tape tape;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const SummaryPair*> batch;
      for (size_t i = start; i < end; ++i) batch.push_back(&pairs[order[i]]);

      VptLossParts parts = vpt.vpt_train_step(&tape, batch, step, sample_rng);
      if (!std::isfinite(parts.total.value())) {
        throw numeric_error("train_vpt: loss diverged at step " +
                            std::to_string(step));
      }
      tape.backward(parts.total);
      opt.step(params);
      opt.zero_grad(params);
      recon_sum += parts.recon;
      kl_sum += parts.kl;
      ++n_batches;
      ++step;
    }
    result.recon_curve.push_back(recon_sum / std::max(1, n_batches));
    result.kl_curve.push_back(kl_sum / std::max(1, n_batches));
    if (cfg.verbose) {
      std::cerr << "vpt epoch " << epoch + 1 << " recon "
                << result.recon_curve.back() << " kl " << result.kl_curve.back()
                << "\n";
    }
  }
  result.steps_run = step;
  return result;
}

VptEvalStats eval_vpt(const Backbone& backbone, VPTModel& vpt,
                      const std::vector<Example>& split,
                      const Vocabulary& vocab) {
  auto pairs = make_summary_pairs(split, vocab, backbone.config().max_len);
  if (pairs.empty()) throw usage_error("eval_vpt: empty split");
  std::vector<const SummaryPair*> all;
  for (const auto& p : pairs) all.push_back(&p);

  PosteriorOutput q = vpt.posterior_forward(nullptr, all, false);
  Tensor prior_mu = vpt.prior_forward_batch(nullptr, all);
  int b = static_cast<int>(all.size());
  double mean_kl =
      kl_divergence(nullptr, q, prior_mu, b).value();

  int n_pool = vpt.config().n_pool_tokens;
  double recon_sum = 0;
  for (int i = 0; i < b; ++i) {
    const SummaryPair& p = *all[i];
    Tensor z = slice_rows(static_cast<Tape*>(nullptr), q.mu, i * n_pool, n_pool);
    AttentionPrefix prefix = vpt.z_to_prefix(nullptr, z);
    auto enc = backbone.encode(nullptr, p.src);
    std::vector<int> dec_in{Vocabulary::kBos};
    dec_in.insert(dec_in.end(), p.summary.begin(), p.summary.end());
    std::vector<int> targets = p.summary;
    targets.push_back(Vocabulary::kEos);
    Tensor logits = backbone.decoder_forward(nullptr, enc, dec_in, &prefix);
    recon_sum += cross_entropy(static_cast<Tape*>(nullptr), logits, targets,
                               Vocabulary::kPad)
                     .value();
  }
  return {recon_sum / b, mean_kl};
}

}  // namespace vptlab
