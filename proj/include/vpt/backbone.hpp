#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vpt/checkpoint.hpp"
#include "vpt/corpus.hpp"
#include "vpt/rng.hpp"
#include "vpt/tensor.hpp"

namespace vptlab {

struct BackboneConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_len = 64;
  float dropout_rate = 0.2f;

  int d_k() const { return d_model / n_heads; }
  void validate() const;
};

// Continuous key/value rows prepended to decoder self-attention at every
// layer. kv[layer][0] are key rows per head, kv[layer][1] value rows, each
// tensor [prefix_len x d_k]. Gradients flow through these tensors, which is
// how phase-2 training reaches the latent space.
struct AttentionPrefix {
  int prefix_len = 0;
  std::vector<std::array<std::vector<Tensor>, 2>> kv;

  bool empty() const { return prefix_len == 0; }
  void validate(const BackboneConfig& cfg) const;
};

struct ContextualEmbeddings {
  Tensor values;              // [seq_len x d_model]
  std::vector<uint8_t> mask;  // 1 = attendable position
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // [d_model x d_model]
  Tensor bq, bk, bv, bo;  // [1 x d_model]
};

struct LayerNormParams {
  Tensor g, b;  // [1 x d_model]
};

struct FfnParams {
  Tensor w1, b1;  // [d_model x d_ff], [1 x d_ff]
  Tensor w2, b2;  // [d_ff x d_model], [1 x d_model]
};

struct EncoderLayerParams {
  AttentionParams attn;
  LayerNormParams ln1, ln2;
  FfnParams ffn;
};

struct DecoderLayerParams {
  AttentionParams self_attn, cross_attn;
  LayerNormParams ln1, ln2, ln3;
  FfnParams ffn;
};

// Pre-LN transformer encoder-decoder with a shared token embedding for code
// and summaries (tied to the output projection) and sinusoidal positions.
class Backbone {
 public:
  Backbone(BackboneConfig cfg, uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }

  ParamList params() const;
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  void set_trainable(bool trainable);
  int64_t param_count() const;
  uint64_t param_fingerprint() const;

  // Encodes BOS..EOS token ids. Rows whose id is PAD are masked out.
  // Inputs longer than max_len are truncated with a warning on stderr.
  ContextualEmbeddings encode(Tape* tape, const std::vector<int>& ids,
                              bool train = false, Rng* rng = nullptr) const;

  // Same as encode but with extra trainable embedding rows prepended before
  // position 0 (the pooling tokens of the prior and posterior nets).
  ContextualEmbeddings encode_with_lead(Tape* tape, const Tensor& lead_rows,
                                        const std::vector<int>& ids,
                                        bool train = false,
                                        Rng* rng = nullptr) const;

  // Teacher-forced decoder pass: dec_input_ids must start with BOS; returns
  // next-token logits for every position, [len x vocab].
  Tensor decoder_forward(Tape* tape, const ContextualEmbeddings& enc,
                         const std::vector<int>& dec_input_ids,
                         const AttentionPrefix* prefix = nullptr,
                         bool train = false, Rng* rng = nullptr) const;

  // Single-position form of the same computation (full recompute); logits
  // for the token following y_prefix_tokens.
  Tensor decode_step(const ContextualEmbeddings& enc,
                     const std::vector<int>& y_prefix_tokens,
                     const AttentionPrefix* prefix = nullptr) const;

  void save(const std::string& path,
            const std::map<std::string, std::string>& extra_meta = {}) const;
  void append_to(CheckpointData& data) const;
  static Backbone load(const CheckpointData& data);

  const Tensor& embedding() const { return embedding_; }
  const Tensor& positional_encoding() const { return pos_enc_; }

  // Scaled dot-product multi-head attention. prefix, when given, holds per
  // head key rows ([0]) and value rows ([1]) prepended to the projected K/V;
  // prefix columns are never masked. kv_mask marks attendable kv positions.
  Tensor mha(Tape* tape, const AttentionParams& p, const Tensor& q_in,
             const Tensor& kv_in, bool causal,
             const std::vector<uint8_t>* kv_mask,
             const std::array<std::vector<Tensor>, 2>* prefix) const;

 private:
  friend class DecoderStepper;

  void visit_params(
      const std::function<void(const std::string&, Tensor&)>& fn) const;
  Tensor ffn(Tape* tape, const FfnParams& p, const Tensor& x) const;
  Tensor embed_rows(Tape* tape, const std::vector<int>& ids,
                    int pos_offset) const;

  BackboneConfig cfg_;
  Tensor embedding_;  // [vocab x d_model]
  Tensor out_bias_;   // [1 x vocab]
  Tensor pos_enc_;    // [max_len x d_model], constant
  std::vector<EncoderLayerParams> enc_layers_;
  std::vector<DecoderLayerParams> dec_layers_;
  LayerNormParams enc_ln_, dec_ln_;
};

// Incremental decoding over a frozen backbone. Runs any number of sessions
// in lockstep so the matrix products batch across sessions; each session
// owns its growing key/value caches and may carry its own prefix. Logits
// match decoder_forward to float tolerance (covered by tests).
class DecoderStepper {
 public:
  DecoderStepper(const Backbone& model, const ContextualEmbeddings& enc);

  // Returns the session index. The prefix, if any, is copied.
  int add_session(const AttentionPrefix* prefix = nullptr);
  int clone_session(int session);
  // Frees a session's caches; the id becomes invalid. Lets long multi-search
  // decodes shed abandoned beams without reindexing live ones.
  void release_session(int session);
  void reset();

  int n_sessions() const { return static_cast<int>(sessions_.size()); }
  int session_len(int session) const { return sessions_[session].len; }

  // Feeds one token to every listed session and returns next-token logits,
  // row r matching session_ids[r]. The first call per session feeds BOS.
  // logits has shape [n x vocab_size].
  std::vector<std::vector<float>> step(const std::vector<int>& session_ids,
                                       const std::vector<int>& tokens);

 private:
  struct Session {
    int len = 0;
    bool has_prefix = false;
    // [layer][head] -> rows of d_k floats, prefix rows first
    std::vector<std::vector<std::vector<float>>> k_cache, v_cache;
  };

  void check_session(int session) const;

  const Backbone& model_;
  int d_, dk_, heads_, layers_;
  std::vector<std::vector<float>> cross_k_, cross_v_;  // per layer [Tx*d]
  std::vector<float> enc_rows_;
  std::vector<uint8_t> enc_mask_;
  int enc_len_ = 0;
  std::vector<Session> sessions_;
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
  uint64_t seed = 0;
  double stop_at_val_acc = 0.0;  // 0 disables early stopping
  bool verbose = false;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> val_acc;
  int epochs_run = 0;
};

// Phase 1: teacher-forced cross-entropy over every (code, ref) pair.
TrainResult train_backbone(Backbone& model, const std::vector<Example>& train,
                           const std::vector<Example>& valid,
                           const Vocabulary& vocab, const TrainConfig& cfg);

// Teacher-forced argmax accuracy over all (code, ref) pairs of a split.
double token_accuracy(const Backbone& model, const std::vector<Example>& split,
                      const Vocabulary& vocab);

// BOS + tokens + EOS as ids, truncated to fit max_len.
std::vector<int> to_source_ids(const Vocabulary& vocab,
                               const std::vector<std::string>& tokens,
                               int max_len);

}  // namespace vptlab
