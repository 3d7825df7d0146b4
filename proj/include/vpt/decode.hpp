#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "vpt/backbone.hpp"
#include "vpt/rng.hpp"
#include "vpt/vpt_model.hpp"

namespace vptlab {

struct DecodeConfig {
  int max_steps = 48;      // content tokens per candidate
  int beam_width = 4;      // B; 10/20 for baseline candidate sets
  float temperature = 1.0f;
  int dbs_groups = 2;      // G, must divide beam_width
  float dbs_lambda = 0.5f;
  uint64_t seed = 0;

  void validate() const;
};

// One decoded sequence. tokens runs BOS..EOS (EOS absent only when the
// search hit max_steps first). per_token_logprob covers the content tokens
// only; BOS is never scored and the EOS score is internal to the search.
struct Candidate {
  std::vector<int> tokens;
  std::vector<double> per_token_logprob;
  double total_logprob = 0;
  int length = 0;  // T, EOS-exclusive content count
  double normalized_score = 0;
};

// Session-oriented view of an incremental decoder. The real path wraps a
// DecoderStepper; tests plug in hand-built token tables. step feeds
// tokens[i] to sessions[i] and returns one row of next-token logits per
// session. release_session may be empty.
struct StepModel {
  int vocab_size = 0;
  int bos = 1;
  int eos = 2;
  std::function<int(const AttentionPrefix*)> add_session;
  std::function<int(int)> clone_session;
  std::function<void(int)> release_session;
  std::function<std::vector<std::vector<float>>(const std::vector<int>&,
                                                const std::vector<int>&)>
      step;
};

StepModel make_step_model(DecoderStepper& stepper, const BackboneConfig& cfg);

// Argmax token each step; ties break toward the lowest token id. EOS is
// never taken as the first content token, so every candidate has T >= 1.
Candidate greedy(const StepModel& m, const DecodeConfig& cfg,
                 const AttentionPrefix* prefix = nullptr);

// n independent draws from softmax(logits / temperature), run in lockstep.
std::vector<Candidate> sample(const StepModel& m, const DecodeConfig& cfg,
                              int n, Rng& rng,
                              const AttentionPrefix* prefix = nullptr);

// Standard beam search by cumulative log-probability. Finished beams retire
// into a completed pool; the search stops once beam_width completed beams
// outscore every live one. Results are ordered by cumulative score.
std::vector<Candidate> beam_search(const StepModel& m, const DecodeConfig& cfg,
                                   const AttentionPrefix* prefix = nullptr);

// Runs many independent beam searches in lockstep so the underlying model
// sees one batched step stream; prefixes[i] seeds search i.
std::vector<std::vector<Candidate>> beam_search_many(
    const StepModel& m, const DecodeConfig& cfg,
    const std::vector<const AttentionPrefix*>& prefixes);

// Gumbel-top-B sampling of sequences without replacement from the tempered
// model whose per-step distributions are softmax(logits / temperature): each
// expansion perturbs its tempered cumulative log-probability with unit-scale
// Gumbel noise, and children are conditioned so their max recovers the
// parent's perturbed score (propagated max-Gumbel perturbation). Reported
// candidate scores are always the true untempered log-probabilities. At
// temperature 1 this samples from the sequence distribution itself; as
// temperature approaches 0 it recovers deterministic beam search.
std::vector<Candidate> stochastic_beam_search(const StepModel& m,
                                              const DecodeConfig& cfg,
                                              Rng& rng);

// Shared-pool diverse beam search: one beam of beam_width hypotheses whose
// per-step extensions are claimed by dbs_groups groups in turn, each later
// group penalized dbs_lambda per same-step token pick of earlier groups.
// With dbs_lambda 0 the selection degenerates to exactly beam_search.
std::vector<Candidate> diverse_beam_search(const StepModel& m,
                                           const DecodeConfig& cfg);

// Per-latent generation: n_latents prior draws at scale tau, one beam
// search of cfg.beam_width per latent prefix, keeping each top beam.
// Scores are prefix-conditioned; rescore_candidates makes them comparable.
std::vector<Candidate> generate_vpt_candidates(const Backbone& model,
                                               const VPTModel& vpt,
                                               const std::vector<int>& src_ids,
                                               const DecodeConfig& cfg,
                                               int n_latents, float tau,
                                               Rng& rng);

// Teacher-forced re-scoring of candidates by the backbone, by default
// prefix-free so scores are comparable across latents.
std::vector<Candidate> rescore_candidates(
    const Backbone& model, const ContextualEmbeddings& enc,
    const std::vector<Candidate>& candidates,
    const AttentionPrefix* prefix = nullptr);

// Exact token-sequence uniqueness, keeping the highest normalized score per
// sequence; output ordered by score, first-seen breaking ties.
std::vector<Candidate> dedupe(const std::vector<Candidate>& candidates);

}  // namespace vptlab
