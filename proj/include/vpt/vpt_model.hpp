#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vpt/backbone.hpp"
#include "vpt/checkpoint.hpp"
#include "vpt/corpus.hpp"
#include "vpt/rng.hpp"
#include "vpt/tensor.hpp"

namespace vptlab {

struct VPTConfig {
  int n_pool_tokens = 2;  // equals the attention prefix length
  int hidden_dim = 64;    // MLP hidden width (posterior heads, prefix projection)
  float prior_sigma_train = 1.0f;
  float inference_sigma_scale = 1.0f;  // tau, decode-time randomness scale
  int kl_cycle_len = 0;                // M; 0 = derive from run length (4 cycles)
  float kl_ramp_fraction = 0.5f;       // R
  float bn_gamma = 0.5f;               // fixed scale of the mean batch norm
  bool trainable_posterior_attention = false;

  void validate() const;
};

// Stacked over the batch: row block i*n_pool..(i+1)*n_pool belongs to pair i.
struct PosteriorOutput {
  Tensor mu;     // [batch*n_pool x d_model]
  Tensor sigma;  // same shape, strictly positive
};

enum class LatentSource { prior, posterior };

struct LatentSample {
  Tensor z;  // [n_pool x d_model]
  LatentSource source = LatentSource::prior;
  AttentionPrefix prefix;
};

// One (code, summary) pair in id space, the unit phase 2 trains on.
struct SummaryPair {
  int example_index = 0;
  std::vector<int> src;      // BOS .. EOS
  std::vector<int> summary;  // content ids only
};

std::vector<SummaryPair> make_summary_pairs(const std::vector<Example>& split,
                                            const Vocabulary& vocab,
                                            int max_len);

double kl_weight(int64_t step, const VPTConfig& cfg);

// z = mu + sigma * eps with eps ~ N(0, I); gradient flows to mu and sigma.
Tensor reparameterize(Tape* tape, const Tensor& mu, const Tensor& sigma,
                      Rng& rng);

// Closed-form KL of N(mu_q, sigma_q^2) against N(prior_mu, 1), summed over
// dimensions, mean over the n_examples pairs stacked in q.
Tensor kl_divergence(Tape* tape, const PosteriorOutput& q,
                     const Tensor& prior_mu, int n_examples);

struct VptLossParts {
  double recon = 0;
  double kl = 0;
  double weight = 0;
  Tensor total;  // recon + weight * kl, differentiable
};

// The variational prefix component grafted onto a frozen backbone: Prior Net,
// Posterior Net with batch-normalized heads, and the latent-to-prefix MLP.
// Only these parameters train in phase 2.
class VPTModel {
 public:
  VPTModel(const Backbone& backbone, VPTConfig cfg, uint64_t seed);

  const VPTConfig& config() const { return cfg_; }
  void set_kl_cycle_len(int m) { cfg_.kl_cycle_len = m; }

  ParamList params() const;
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  int64_t param_count() const;
  uint64_t param_fingerprint() const;

  // Prior pooling tokens + code through the frozen encoder; the pooled
  // contextual embeddings are the prior mean, [n_pool x d_model].
  Tensor prior_forward(Tape* tape, const std::vector<int>& src_ids) const;
  Tensor prior_forward_batch(Tape* tape,
                             const std::vector<const SummaryPair*>& batch) const;

  // Posterior pooling tokens + [x, SEP, y] through the encoder, pooled rows
  // through the MLP heads with batch norm. Train mode uses batch statistics
  // and updates the running averages.
  PosteriorOutput posterior_forward(Tape* tape,
                                    const std::vector<const SummaryPair*>& batch,
                                    bool train);

  // Two-layer MLP from z rows to per-layer per-head key/value prefix rows.
  AttentionPrefix z_to_prefix(Tape* tape, const Tensor& z) const;

  // One phase-2 objective evaluation over a batch: reconstruction with a
  // posterior-sampled prefix plus kl_weight(step) times the KL term.
  VptLossParts vpt_train_step(Tape* tape,
                              const std::vector<const SummaryPair*>& batch,
                              int64_t step, Rng& rng);

  // n draws z ~ N(mu_p(x), tau^2 I), each projected to a prefix.
  std::vector<LatentSample> sample_prior(const std::vector<int>& src_ids,
                                         float tau, Rng& rng, int n) const;

  void append_to(CheckpointData& data) const;
  static VPTModel load(const CheckpointData& data, const Backbone& backbone);

  const Backbone& backbone() const { return *backbone_; }

 private:
  void visit_params(
      const std::function<void(const std::string&, Tensor&)>& fn) const;
  ContextualEmbeddings posterior_encode(Tape* tape, const Tensor& lead,
                                        const std::vector<int>& ids) const;
  std::vector<int> posterior_ids(const SummaryPair& pair) const;

  const Backbone* backbone_;
  VPTConfig cfg_;

  Tensor prior_pool_;  // [n_pool x d_model]
  Tensor post_pool_;   // [n_pool x d_model]

  Tensor trunk_w_, trunk_b_;  // pooled -> hidden
  Tensor mu_w_, mu_b_;        // hidden -> d_model
  Tensor sigma_w_, sigma_b_;  // hidden -> d_model

  Tensor mu_bn_gamma_;  // fixed at bn_gamma, not trainable
  Tensor mu_bn_beta_;
  Tensor sigma_bn_gamma_, sigma_bn_beta_;
  mutable BatchNormState mu_bn_state_, sigma_bn_state_;

  Tensor px_w1_, px_b1_;  // z -> hidden
  Tensor px_w2_, px_b2_;  // hidden -> 2 * n_layers * d_model

  // optional single trainable attention layer for the posterior input
  AttentionParams post_attn_;
  LayerNormParams post_attn_ln_;
};

struct VptTrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
  uint64_t seed = 0;
  bool verbose = false;
};

struct VptTrainResult {
  std::vector<double> recon_curve;  // per-epoch means
  std::vector<double> kl_curve;
  int64_t steps_run = 0;
};

// Phase 2: trains only the VPT parameters against the frozen backbone,
// cycling the KL weight. Derives kl_cycle_len when the config left it at 0.
VptTrainResult train_vpt(Backbone& backbone, VPTModel& vpt,
                         const std::vector<Example>& train,
                         const Vocabulary& vocab, const VptTrainConfig& cfg);

struct VptEvalStats {
  double mean_recon = 0;  // teacher-forced, z = posterior mean
  double mean_kl = 0;     // per example, nats
};

// Eval-mode diagnostics over a split (running BN statistics, no sampling).
VptEvalStats eval_vpt(const Backbone& backbone, VPTModel& vpt,
                      const std::vector<Example>& split,
                      const Vocabulary& vocab);

}  // namespace vptlab
