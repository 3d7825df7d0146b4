#include "vpt/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <numeric>

#include "vpt/adam.hpp"
#include "vpt/errors.hpp"

namespace vptlab {
namespace {

Tensor glorot(const Shape& shape, Rng& rng) {
  Tensor t = Tensor::zeros(shape, true);
  init_glorot(t, rng);
  return t;
}

Tensor zeros_param(const Shape& shape) { return Tensor::zeros(shape, true); }

Tensor ones_param(const Shape& shape) { return Tensor::full(shape, 1.0f, true); }

AttentionParams make_attn(int d, Rng& rng) {
  AttentionParams p;
  p.wq = glorot({d, d}, rng);
  p.wk = glorot({d, d}, rng);
  p.wv = glorot({d, d}, rng);
  p.wo = glorot({d, d}, rng);
  p.bq = zeros_param({1, d});
  p.bk = zeros_param({1, d});
  p.bv = zeros_param({1, d});
  p.bo = zeros_param({1, d});
  return p;
}

LayerNormParams make_ln(int d) { return {ones_param({1, d}), zeros_param({1, d})}; }

FfnParams make_ffn(int d, int d_ff, Rng& rng) {
  FfnParams p;
  p.w1 = glorot({d, d_ff}, rng);
  p.b1 = zeros_param({1, d_ff});
  p.w2 = glorot({d_ff, d}, rng);
  p.b2 = zeros_param({1, d});
  return p;
}

Tensor sinusoidal_pos_enc(int max_len, int d) {
  Tensor pe = Tensor::zeros({max_len, d});
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d / 2; ++i) {
      double angle = pos / std::pow(10000.0, (2.0 * i) / d);
      pe.at(pos, 2 * i) = static_cast<float>(std::sin(angle));
      pe.at(pos, 2 * i + 1) = static_cast<float>(std::cos(angle));
    }
  }
  return pe;
}

constexpr float kMaskNegInf = -1e9f;

// Raw float helpers for the incremental decode path. These mirror the taped
// ops exactly (same eps, same gelu form) so both paths agree numerically.
void gemm(const float* __restrict a, const float* __restrict b,
          float* __restrict c, int m, int k, int n) {
  std::fill(c, c + static_cast<size_t>(m) * n, 0.0f);
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      float av = arow[p];
      if (av == 0.0f) continue;
      const float* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void add_bias_rows(float* x, const float* bias, int m, int n) {
  for (int i = 0; i < m; ++i) {
    float* row = x + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) row[j] += bias[j];
  }
}

void layer_norm_rows(const float* x, const float* g, const float* b, float* out,
                     int m, int n) {
  for (int i = 0; i < m; ++i) {
    const float* row = x + static_cast<size_t>(i) * n;
    float* orow = out + static_cast<size_t>(i) * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += row[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double dv = row[j] - mean;
      var += dv * dv;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int j = 0; j < n; ++j) {
      orow[j] = static_cast<float>(g[j] * (row[j] - mean) * inv + b[j]);
    }
  }
}

void gelu_rows(float* x, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    double v = x[i];
    x[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865475)));
  }
}

}  // namespace

void BackboneConfig::validate() const {
  if (vocab_size <= 0) throw usage_error("BackboneConfig: vocab_size not set");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
      max_len <= 0) {
    throw usage_error("BackboneConfig: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw usage_error("BackboneConfig: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (dropout_rate < 0.0f || dropout_rate >= 1.0f) {
    throw usage_error("BackboneConfig: dropout_rate must be in [0, 1)");
  }
}

void AttentionPrefix::validate(const BackboneConfig& cfg) const {
  if (prefix_len == 0) return;
  if (static_cast<int>(kv.size()) != cfg.n_layers) {
    throw shape_error("AttentionPrefix: expected " +
                      std::to_string(cfg.n_layers) + " layers, got " +
                      std::to_string(kv.size()));
  }
  for (const auto& layer : kv) {
    for (const auto& side : layer) {
      if (static_cast<int>(side.size()) != cfg.n_heads) {
        throw shape_error("AttentionPrefix: head count mismatch");
      }
      for (const auto& t : side) {
        if (t.shape != Shape{prefix_len, cfg.d_k()}) {
          throw shape_error("AttentionPrefix: row shape " + shape_str(t.shape) +
                            " != [" + std::to_string(prefix_len) + "x" +
                            std::to_string(cfg.d_k()) + "]");
        }
      }
    }
  }
}

Backbone::Backbone(BackboneConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  embedding_ = glorot({cfg_.vocab_size, cfg_.d_model}, rng);
  out_bias_ = zeros_param({1, cfg_.vocab_size});
  pos_enc_ = sinusoidal_pos_enc(cfg_.max_len, cfg_.d_model);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    EncoderLayerParams e;
    e.attn = make_attn(cfg_.d_model, rng);
    e.ln1 = make_ln(cfg_.d_model);
    e.ln2 = make_ln(cfg_.d_model);
    e.ffn = make_ffn(cfg_.d_model, cfg_.d_ff, rng);
    enc_layers_.push_back(std::move(e));

    DecoderLayerParams d;
    d.self_attn = make_attn(cfg_.d_model, rng);
    d.cross_attn = make_attn(cfg_.d_model, rng);
    d.ln1 = make_ln(cfg_.d_model);
    d.ln2 = make_ln(cfg_.d_model);
    d.ln3 = make_ln(cfg_.d_model);
    d.ffn = make_ffn(cfg_.d_model, cfg_.d_ff, rng);
    dec_layers_.push_back(std::move(d));
  }
  enc_ln_ = make_ln(cfg_.d_model);
  dec_ln_ = make_ln(cfg_.d_model);
}

void Backbone::visit_params(
    const std::function<void(const std::string&, Tensor&)>& fn) const {
  auto* self = const_cast<Backbone*>(this);
  auto attn = [&](const std::string& base, AttentionParams& p) {
    fn(base + "/wq", p.wq);
    fn(base + "/wk", p.wk);
    fn(base + "/wv", p.wv);
    fn(base + "/wo", p.wo);
    fn(base + "/bq", p.bq);
    fn(base + "/bk", p.bk);
    fn(base + "/bv", p.bv);
    fn(base + "/bo", p.bo);
  };
  auto ln = [&](const std::string& base, LayerNormParams& p) {
    fn(base + "/g", p.g);
    fn(base + "/b", p.b);
  };
  auto ffn = [&](const std::string& base, FfnParams& p) {
    fn(base + "/w1", p.w1);
    fn(base + "/b1", p.b1);
    fn(base + "/w2", p.w2);
    fn(base + "/b2", p.b2);
  };
  fn("backbone/embedding", self->embedding_);
  fn("backbone/out_bias", self->out_bias_);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    std::string base = "backbone/enc" + std::to_string(l);
    attn(base + "/attn", self->enc_layers_[l].attn);
    ln(base + "/ln1", self->enc_layers_[l].ln1);
    ln(base + "/ln2", self->enc_layers_[l].ln2);
    ffn(base + "/ffn", self->enc_layers_[l].ffn);
  }
  for (int l = 0; l < cfg_.n_layers; ++l) {
    std::string base = "backbone/dec" + std::to_string(l);
    attn(base + "/self", self->dec_layers_[l].self_attn);
    attn(base + "/cross", self->dec_layers_[l].cross_attn);
    ln(base + "/ln1", self->dec_layers_[l].ln1);
    ln(base + "/ln2", self->dec_layers_[l].ln2);
    ln(base + "/ln3", self->dec_layers_[l].ln3);
    ffn(base + "/ffn", self->dec_layers_[l].ffn);
  }
  ln("backbone/enc_ln", self->enc_ln_);
  ln("backbone/dec_ln", self->dec_ln_);
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  visit_params([&](const std::string& name, Tensor& t) {
    out.emplace_back(name, t);
  });
  return out;
}

ParamList Backbone::params() const {
  ParamList list;
  visit_params([&](const std::string& name, Tensor& t) {
    list.push_back({name, &t});
  });
  return list;
}

void Backbone::set_trainable(bool trainable) {
  visit_params([trainable](const std::string&, Tensor& t) {
    if (trainable) {
      t.enable_grad();
    } else {
      t.requires_grad = false;
    }
  });
}

int64_t Backbone::param_count() const {
  int64_t n = 0;
  visit_params([&](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

uint64_t Backbone::param_fingerprint() const {
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

Tensor Backbone::embed_rows(Tape* tape, const std::vector<int>& ids,
                            int pos_offset) const {
  Tensor x = embedding_rows(tape, embedding_, ids);
  x = scale(tape, x, std::sqrt(static_cast<float>(cfg_.d_model)));
  Tensor pe = slice_rows(static_cast<Tape*>(nullptr), pos_enc_, pos_offset,
                         static_cast<int>(ids.size()));
  return add(tape, x, pe);
}

Tensor Backbone::mha(Tape* tape, const AttentionParams& p, const Tensor& q_in,
                     const Tensor& kv_in, bool causal,
                     const std::vector<uint8_t>* kv_mask,
                     const std::array<std::vector<Tensor>, 2>* prefix) const {
  int dk = cfg_.d_k();
  int tq = q_in.shape[0];
  int tk = kv_in.shape[0];
  int plen = prefix ? (*prefix)[0][0].shape[0] : 0;

  Tensor q = add_bias(tape, matmul(tape, q_in, p.wq), p.bq);
  Tensor k = add_bias(tape, matmul(tape, kv_in, p.wk), p.bk);
  Tensor v = add_bias(tape, matmul(tape, kv_in, p.wv), p.bv);

  bool need_mask = causal || kv_mask;
  Tensor mask;
  if (need_mask) {
    mask = Tensor::zeros({tq, plen + tk});
    for (int i = 0; i < tq; ++i) {
      for (int j = 0; j < tk; ++j) {
        bool ok = !(causal && j > i) && !(kv_mask && !(*kv_mask)[j]);
        if (!ok) mask.at(i, plen + j) = kMaskNegInf;
      }
    }
  }

  Tensor out;
  for (int h = 0; h < cfg_.n_heads; ++h) {
    Tensor qh = slice_cols(tape, q, h * dk, dk);
    Tensor kh = slice_cols(tape, k, h * dk, dk);
    Tensor vh = slice_cols(tape, v, h * dk, dk);
    if (prefix) {
      kh = concat_rows(tape, (*prefix)[0][h], kh);
      vh = concat_rows(tape, (*prefix)[1][h], vh);
    }
    Tensor scores =
        scale(tape, matmul_nt(tape, qh, kh), 1.0f / std::sqrt(static_cast<float>(dk)));
    if (need_mask) scores = add(tape, scores, mask);
    Tensor alpha = softmax(tape, scores, 1);
    Tensor oh = matmul(tape, alpha, vh);
    out = h == 0 ? oh : concat_cols(tape, out, oh);
  }
  return add_bias(tape, matmul(tape, out, p.wo), p.bo);
}

Tensor Backbone::ffn(Tape* tape, const FfnParams& p, const Tensor& x) const {
  Tensor h = gelu(tape, add_bias(tape, matmul(tape, x, p.w1), p.b1));
  return add_bias(tape, matmul(tape, h, p.w2), p.b2);
}

ContextualEmbeddings Backbone::encode(Tape* tape, const std::vector<int>& ids,
                                      bool train, Rng* rng) const {
  Tensor none;
  return encode_with_lead(tape, none, ids, train, rng);
}

ContextualEmbeddings Backbone::encode_with_lead(Tape* tape,
                                                const Tensor& lead_rows,
                                                const std::vector<int>& ids,
                                                bool train, Rng* rng) const {
  int lead = lead_rows.data ? lead_rows.shape[0] : 0;
  std::vector<int> use_ids = ids;
  if (lead + static_cast<int>(use_ids.size()) > cfg_.max_len) {
    std::cerr << "warning: encoder input length "
              << lead + use_ids.size() << " exceeds max_len " << cfg_.max_len
              << ", truncating\n";
    use_ids.resize(cfg_.max_len - lead);
  }
  if (use_ids.empty() && lead == 0) {
    throw usage_error("encode: empty input");
  }

  Tensor x;
  if (lead > 0) {
    Tensor tok = use_ids.empty()
                     ? Tensor()
                     : embedding_rows(tape, embedding_,
                                      use_ids);
    if (tok.data) {
      tok = scale(tape, tok, std::sqrt(static_cast<float>(cfg_.d_model)));
      x = concat_rows(tape, lead_rows, tok);
    } else {
      x = lead_rows;
    }
    Tensor pe = slice_rows(static_cast<Tape*>(nullptr), pos_enc_, 0, x.shape[0]);
    x = add(tape, x, pe);
  } else {
    x = embed_rows(tape, use_ids, 0);
  }

  std::vector<uint8_t> mask(lead + use_ids.size(), 1);
  bool any_pad = false;
  for (size_t i = 0; i < use_ids.size(); ++i) {
    if (use_ids[i] == Vocabulary::kPad) {
      mask[lead + i] = 0;
      any_pad = true;
    }
  }

  if (train && cfg_.dropout_rate > 0) {
    x = dropout(tape, x, cfg_.dropout_rate, *rng, true);
  }
  for (const auto& layer : enc_layers_) {
    Tensor h = layer_norm(tape, x, layer.ln1.g, layer.ln1.b);
    Tensor a = mha(tape, layer.attn, h, h, false, any_pad ? &mask : nullptr,
                   nullptr);
    if (train && cfg_.dropout_rate > 0) {
      a = dropout(tape, a, cfg_.dropout_rate, *rng, true);
    }
    x = add(tape, x, a);
    h = layer_norm(tape, x, layer.ln2.g, layer.ln2.b);
    Tensor f = ffn(tape, layer.ffn, h);
    if (train && cfg_.dropout_rate > 0) {
      f = dropout(tape, f, cfg_.dropout_rate, *rng, true);
    }
    x = add(tape, x, f);
  }
  x = layer_norm(tape, x, enc_ln_.g, enc_ln_.b);
  return {x, std::move(mask)};
}

Tensor Backbone::decoder_forward(Tape* tape, const ContextualEmbeddings& enc,
                                 const std::vector<int>& dec_input_ids,
                                 const AttentionPrefix* prefix, bool train,
                                 Rng* rng) const {
  if (dec_input_ids.empty() || dec_input_ids[0] != Vocabulary::kBos) {
    throw usage_error("decoder_forward: input must start with BOS");
  }
  if (static_cast<int>(dec_input_ids.size()) > cfg_.max_len) {
    throw usage_error("decoder_forward: input longer than max_len");
  }
  for (int id : dec_input_ids) {
    if (id < 0 || id >= cfg_.vocab_size) {
      throw usage_error("decoder_forward: token id " + std::to_string(id) +
                        " out of vocab");
    }
  }
  if (prefix && !prefix->empty()) prefix->validate(cfg_);
  bool use_prefix = prefix && !prefix->empty();

  Tensor y = embed_rows(tape, dec_input_ids, 0);
  if (train && cfg_.dropout_rate > 0) {
    y = dropout(tape, y, cfg_.dropout_rate, *rng, true);
  }
  bool enc_has_pad =
      std::find(enc.mask.begin(), enc.mask.end(), 0) != enc.mask.end();
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto& layer = dec_layers_[l];
    Tensor h = layer_norm(tape, y, layer.ln1.g, layer.ln1.b);
    Tensor a = mha(tape, layer.self_attn, h, h, true, nullptr,
                   use_prefix ? &prefix->kv[l] : nullptr);
    if (train && cfg_.dropout_rate > 0) {
      a = dropout(tape, a, cfg_.dropout_rate, *rng, true);
    }
    y = add(tape, y, a);

    h = layer_norm(tape, y, layer.ln2.g, layer.ln2.b);
    Tensor c = mha(tape, layer.cross_attn, h, enc.values, false,
                   enc_has_pad ? &enc.mask : nullptr, nullptr);
    if (train && cfg_.dropout_rate > 0) {
      c = dropout(tape, c, cfg_.dropout_rate, *rng, true);
    }
    y = add(tape, y, c);

    h = layer_norm(tape, y, layer.ln3.g, layer.ln3.b);
    Tensor f = ffn(tape, layer.ffn, h);
    if (train && cfg_.dropout_rate > 0) {
      f = dropout(tape, f, cfg_.dropout_rate, *rng, true);
    }
    y = add(tape, y, f);
  }
  y = layer_norm(tape, y, dec_ln_.g, dec_ln_.b);
  Tensor logits = matmul_nt(tape, y, embedding_);
  return add_bias(tape, logits, out_bias_);
}

Tensor Backbone::decode_step(const ContextualEmbeddings& enc,
                             const std::vector<int>& y_prefix_tokens,
                             const AttentionPrefix* prefix) const {
  Tensor logits = decoder_forward(nullptr, enc, y_prefix_tokens, prefix);
  return slice_rows(static_cast<Tape*>(nullptr), logits,
                    logits.shape[0] - 1, 1);
}

void Backbone::append_to(CheckpointData& data) const {
  data.meta["backbone.vocab_size"] = std::to_string(cfg_.vocab_size);
  data.meta["backbone.d_model"] = std::to_string(cfg_.d_model);
  data.meta["backbone.n_layers"] = std::to_string(cfg_.n_layers);
  data.meta["backbone.n_heads"] = std::to_string(cfg_.n_heads);
  data.meta["backbone.d_ff"] = std::to_string(cfg_.d_ff);
  data.meta["backbone.max_len"] = std::to_string(cfg_.max_len);
  data.meta["backbone.dropout_rate"] = std::to_string(cfg_.dropout_rate);
  for (auto& [name, t] : named_params()) {
    data.tensors[name] = {t.shape, *t.data};
  }
}

void Backbone::save(const std::string& path,
                    const std::map<std::string, std::string>& extra_meta) const {
  CheckpointData data;
  data.meta = extra_meta;
  append_to(data);
  save_checkpoint(path, data);
}

Backbone Backbone::load(const CheckpointData& data) {
  auto meta_int = [&](const std::string& key) {
    auto it = data.meta.find(key);
    if (it == data.meta.end()) {
      throw data_error("Backbone::load: missing meta key " + key);
    }
    return std::stoi(it->second);
  };
  BackboneConfig cfg;
  cfg.vocab_size = meta_int("backbone.vocab_size");
  cfg.d_model = meta_int("backbone.d_model");
  cfg.n_layers = meta_int("backbone.n_layers");
  cfg.n_heads = meta_int("backbone.n_heads");
  cfg.d_ff = meta_int("backbone.d_ff");
  cfg.max_len = meta_int("backbone.max_len");
  cfg.dropout_rate = std::stof(data.meta.at("backbone.dropout_rate"));

  Backbone model(cfg, 0);
  for (auto& [name, t] : model.named_params()) {
    auto it = data.tensors.find(name);
    if (it == data.tensors.end()) {
      throw data_error("Backbone::load: checkpoint missing tensor " + name);
    }
    if (it->second.first != t.shape) {
      throw shape_error("Backbone::load: shape mismatch for " + name);
    }
    *t.data = it->second.second;
  }
  return model;
}

DecoderStepper::DecoderStepper(const Backbone& model,
                               const ContextualEmbeddings& enc)
    : model_(model),
      d_(model.cfg_.d_model),
      dk_(model.cfg_.d_k()),
      heads_(model.cfg_.n_heads),
      layers_(model.cfg_.n_layers) {
  enc_len_ = enc.values.shape[0];
  enc_rows_ = *enc.values.data;
  enc_mask_ = enc.mask;
  cross_k_.resize(layers_);
  cross_v_.resize(layers_);
  for (int l = 0; l < layers_; ++l) {
    const auto& p = model_.dec_layers_[l].cross_attn;
    cross_k_[l].resize(static_cast<size_t>(enc_len_) * d_);
    cross_v_[l].resize(static_cast<size_t>(enc_len_) * d_);
    gemm(enc_rows_.data(), p.wk.data->data(), cross_k_[l].data(), enc_len_, d_, d_);
    gemm(enc_rows_.data(), p.wv.data->data(), cross_v_[l].data(), enc_len_, d_, d_);
    add_bias_rows(cross_k_[l].data(), p.bk.data->data(), enc_len_, d_);
    add_bias_rows(cross_v_[l].data(), p.bv.data->data(), enc_len_, d_);
  }
}

int DecoderStepper::add_session(const AttentionPrefix* prefix) {
  Session s;
  s.k_cache.assign(layers_, std::vector<std::vector<float>>(heads_));
  s.v_cache.assign(layers_, std::vector<std::vector<float>>(heads_));
  if (prefix && !prefix->empty()) {
    prefix->validate(model_.cfg_);
    s.has_prefix = true;
    for (int l = 0; l < layers_; ++l) {
      for (int h = 0; h < heads_; ++h) {
        const auto& pk = *prefix->kv[l][0][h].data;
        const auto& pv = *prefix->kv[l][1][h].data;
        for (int r = 0; r < prefix->prefix_len; ++r) {
          s.k_cache[l][h].insert(s.k_cache[l][h].end(), pk.begin() + r * dk_,
                                 pk.begin() + (r + 1) * dk_);
          s.v_cache[l][h].insert(s.v_cache[l][h].end(), pv.begin() + r * dk_,
                                 pv.begin() + (r + 1) * dk_);
        }
      }
    }
  }
  sessions_.push_back(std::move(s));
  return static_cast<int>(sessions_.size()) - 1;
}

int DecoderStepper::clone_session(int session) {
  check_session(session);
  sessions_.push_back(sessions_[session]);
  return static_cast<int>(sessions_.size()) - 1;
}

void DecoderStepper::release_session(int session) {
  check_session(session);
  Session& s = sessions_[session];
  s.len = -1;
  s.k_cache = {};
  s.v_cache = {};
}

void DecoderStepper::check_session(int session) const {
  if (session < 0 || session >= static_cast<int>(sessions_.size())) {
    throw usage_error("DecoderStepper: session " + std::to_string(session) +
                      " out of range");
  }
  if (sessions_[session].len < 0) {
    throw usage_error("DecoderStepper: session " + std::to_string(session) +
                      " was released");
  }
}

void DecoderStepper::reset() { sessions_.clear(); }

std::vector<std::vector<float>> DecoderStepper::step(
    const std::vector<int>& session_ids, const std::vector<int>& tokens) {
  if (session_ids.size() != tokens.size()) {
    throw usage_error("DecoderStepper::step: session/token count mismatch");
  }
  int a = static_cast<int>(session_ids.size());
  for (int sid : session_ids) check_session(sid);
  int v = model_.cfg_.vocab_size;
  const auto& emb = *model_.embedding_.data;
  const auto& pe = *model_.pos_enc_.data;
  float sqrt_d = std::sqrt(static_cast<float>(d_));

  std::vector<float> x(static_cast<size_t>(a) * d_);
  for (int r = 0; r < a; ++r) {
    Session& s = sessions_[session_ids[r]];
    int tok = tokens[r];
    if (tok < 0 || tok >= v) {
      throw usage_error("DecoderStepper::step: token id out of vocab");
    }
    if (s.len >= model_.cfg_.max_len) {
      throw usage_error("DecoderStepper::step: session exceeded max_len");
    }
    for (int j = 0; j < d_; ++j) {
      x[static_cast<size_t>(r) * d_ + j] =
          emb[static_cast<size_t>(tok) * d_ + j] * sqrt_d +
          pe[static_cast<size_t>(s.len) * d_ + j];
    }
  }

  std::vector<float> h(x.size()), q(x.size()), k(x.size()), val(x.size()),
      attn_out(x.size()), proj(x.size());
  std::vector<float> ff(static_cast<size_t>(a) * model_.cfg_.d_ff);
  std::vector<float> scores_buf(model_.cfg_.max_len + 64);
  float* scores = scores_buf.data();
  float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dk_));

  for (int l = 0; l < layers_; ++l) {
    const auto& layer = model_.dec_layers_[l];

    // self-attention over per-session caches (prefix rows first)
    layer_norm_rows(x.data(), layer.ln1.g.data->data(), layer.ln1.b.data->data(),
                    h.data(), a, d_);
    gemm(h.data(), layer.self_attn.wq.data->data(), q.data(), a, d_, d_);
    gemm(h.data(), layer.self_attn.wk.data->data(), k.data(), a, d_, d_);
    gemm(h.data(), layer.self_attn.wv.data->data(), val.data(), a, d_, d_);
    add_bias_rows(q.data(), layer.self_attn.bq.data->data(), a, d_);
    add_bias_rows(k.data(), layer.self_attn.bk.data->data(), a, d_);
    add_bias_rows(val.data(), layer.self_attn.bv.data->data(), a, d_);

    for (int r = 0; r < a; ++r) {
      Session& s = sessions_[session_ids[r]];
      for (int hd = 0; hd < heads_; ++hd) {
        auto& kc = s.k_cache[l][hd];
        auto& vc = s.v_cache[l][hd];
        kc.insert(kc.end(), k.begin() + static_cast<size_t>(r) * d_ + hd * dk_,
                  k.begin() + static_cast<size_t>(r) * d_ + (hd + 1) * dk_);
        vc.insert(vc.end(), val.begin() + static_cast<size_t>(r) * d_ + hd * dk_,
                  val.begin() + static_cast<size_t>(r) * d_ + (hd + 1) * dk_);
        int rows = static_cast<int>(kc.size()) / dk_;
        if (rows > static_cast<int>(scores_buf.size())) {
          scores_buf.resize(rows);
          scores = scores_buf.data();
        }
        const float* qrow = q.data() + static_cast<size_t>(r) * d_ + hd * dk_;
        float mx = -1e30f;
        for (int t = 0; t < rows; ++t) {
          float dot = 0;
          const float* krow = kc.data() + static_cast<size_t>(t) * dk_;
          for (int j = 0; j < dk_; ++j) dot += qrow[j] * krow[j];
          scores[t] = dot * inv_sqrt_dk;
          mx = std::max(mx, scores[t]);
        }
        float z = 0;
        for (int t = 0; t < rows; ++t) {
          scores[t] = std::exp(scores[t] - mx);
          z += scores[t];
        }
        float* orow = attn_out.data() + static_cast<size_t>(r) * d_ + hd * dk_;
        std::fill(orow, orow + dk_, 0.0f);
        for (int t = 0; t < rows; ++t) {
          float w = scores[t] / z;
          const float* vrow = vc.data() + static_cast<size_t>(t) * dk_;
          for (int j = 0; j < dk_; ++j) orow[j] += w * vrow[j];
        }
      }
    }
    gemm(attn_out.data(), layer.self_attn.wo.data->data(), proj.data(), a, d_, d_);
    add_bias_rows(proj.data(), layer.self_attn.bo.data->data(), a, d_);
    for (size_t i = 0; i < x.size(); ++i) x[i] += proj[i];

    // cross-attention over the shared encoder keys/values
    layer_norm_rows(x.data(), layer.ln2.g.data->data(), layer.ln2.b.data->data(),
                    h.data(), a, d_);
    gemm(h.data(), layer.cross_attn.wq.data->data(), q.data(), a, d_, d_);
    add_bias_rows(q.data(), layer.cross_attn.bq.data->data(), a, d_);
    for (int r = 0; r < a; ++r) {
      for (int hd = 0; hd < heads_; ++hd) {
        const float* qrow = q.data() + static_cast<size_t>(r) * d_ + hd * dk_;
        float mx = -1e30f;
        for (int t = 0; t < enc_len_; ++t) {
          if (!enc_mask_[t]) {
            scores[t] = kMaskNegInf;
            continue;
          }
          float dot = 0;
          const float* krow =
              cross_k_[l].data() + static_cast<size_t>(t) * d_ + hd * dk_;
          for (int j = 0; j < dk_; ++j) dot += qrow[j] * krow[j];
          scores[t] = dot * inv_sqrt_dk;
        }
        for (int t = 0; t < enc_len_; ++t) mx = std::max(mx, scores[t]);
        float z = 0;
        for (int t = 0; t < enc_len_; ++t) {
          scores[t] = std::exp(scores[t] - mx);
          z += scores[t];
        }
        float* orow = attn_out.data() + static_cast<size_t>(r) * d_ + hd * dk_;
        std::fill(orow, orow + dk_, 0.0f);
        for (int t = 0; t < enc_len_; ++t) {
          float w = scores[t] / z;
          const float* vrow =
              cross_v_[l].data() + static_cast<size_t>(t) * d_ + hd * dk_;
          for (int j = 0; j < dk_; ++j) orow[j] += w * vrow[j];
        }
      }
    }
    gemm(attn_out.data(), layer.cross_attn.wo.data->data(), proj.data(), a, d_, d_);
    add_bias_rows(proj.data(), layer.cross_attn.bo.data->data(), a, d_);
    for (size_t i = 0; i < x.size(); ++i) x[i] += proj[i];

    // feed-forward
    layer_norm_rows(x.data(), layer.ln3.g.data->data(), layer.ln3.b.data->data(),
                    h.data(), a, d_);
    gemm(h.data(), layer.ffn.w1.data->data(), ff.data(), a, d_, model_.cfg_.d_ff);
    add_bias_rows(ff.data(), layer.ffn.b1.data->data(), a, model_.cfg_.d_ff);
    gelu_rows(ff.data(), ff.size());
    gemm(ff.data(), layer.ffn.w2.data->data(), proj.data(), a, model_.cfg_.d_ff, d_);
    add_bias_rows(proj.data(), layer.ffn.b2.data->data(), a, d_);
    for (size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
  }

  layer_norm_rows(x.data(), model_.dec_ln_.g.data->data(),
                  model_.dec_ln_.b.data->data(), h.data(), a, d_);
  const auto& ob = *model_.out_bias_.data;
  std::vector<std::vector<float>> logits(a, std::vector<float>(v));
  for (int r = 0; r < a; ++r) {
    const float* hrow = h.data() + static_cast<size_t>(r) * d_;
    for (int t = 0; t < v; ++t) {
      const float* erow = emb.data() + static_cast<size_t>(t) * d_;
      float dot = 0;
      for (int j = 0; j < d_; ++j) dot += hrow[j] * erow[j];
      logits[r][t] = dot + ob[t];
    }
  }
  for (int r = 0; r < a; ++r) ++sessions_[session_ids[r]].len;
  return logits;
}

std::vector<int> to_source_ids(const Vocabulary& vocab,
                               const std::vector<std::string>& tokens,
                               int max_len) {
  std::vector<int> ids;
  ids.reserve(tokens.size() + 2);
  ids.push_back(Vocabulary::kBos);
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  ids.push_back(Vocabulary::kEos);
  if (static_cast<int>(ids.size()) > max_len) {
    std::cerr << "warning: source length " << ids.size() << " exceeds max_len "
              << max_len << ", truncating\n";
    ids.resize(max_len - 1);
    ids.push_back(Vocabulary::kEos);
  }
  return ids;
}

namespace {

struct Pair {
  std::vector<int> src;
  std::vector<int> dec_in;   // BOS y1..yT
  std::vector<int> targets;  // y1..yT EOS
};

std::vector<Pair> make_pairs(const std::vector<Example>& split,
                             const Vocabulary& vocab, int max_len) {
  std::vector<Pair> pairs;
  for (const auto& ex : split) {
    auto src = to_source_ids(vocab, ex.code, max_len);
    for (const auto& ref : ex.refs) {
      Pair p;
      p.src = src;
      auto ids = vocab.encode(ref);
      if (static_cast<int>(ids.size()) + 1 > max_len) {
        ids.resize(max_len - 1);
      }
      p.dec_in.push_back(Vocabulary::kBos);
      p.dec_in.insert(p.dec_in.end(), ids.begin(), ids.end());
      p.targets = ids;
      p.targets.push_back(Vocabulary::kEos);
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

}  // namespace

double token_accuracy(const Backbone& model, const std::vector<Example>& split,
                      const Vocabulary& vocab) {
  auto pairs = make_pairs(split, vocab, model.config().max_len);
  int64_t correct = 0, total = 0;
  for (const auto& p : pairs) {
    auto enc = model.encode(nullptr, p.src);
    Tensor logits = model.decoder_forward(nullptr, enc, p.dec_in);
    int v = model.config().vocab_size;
    for (size_t t = 0; t < p.targets.size(); ++t) {
      int best = 0;
      float bv = logits.at(static_cast<int>(t), 0);
      for (int j = 1; j < v; ++j) {
        if (logits.at(static_cast<int>(t), j) > bv) {
          bv = logits.at(static_cast<int>(t), j);
          best = j;
        }
      }
      correct += best == p.targets[t];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / total : 0.0;
}

TrainResult train_backbone(Backbone& model, const std::vector<Example>& train,
                           const std::vector<Example>& valid,
                           const Vocabulary& vocab, const TrainConfig& cfg) {
  if (train.empty()) throw usage_error("train_backbone: empty training split");
  auto pairs = make_pairs(train, vocab, model.config().max_len);

  Rng rng(cfg.seed);
  Rng dropout_rng = rng.fork(1);
  Adam opt({cfg.lr});
  ParamList params = model.params();
  TrainResult result;

  std::vector<int> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.randint(static_cast<int>(i))]);
    }
    double epoch_loss = 0.0;
    int n_batches = 0;
    Tape tape;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      size_t end = std::min(order.size(), start + cfg.batch_size);
      Tensor loss;
      for (size_t i = start; i < end; ++i) {
        const Pair& p = pairs[order[i]];
        auto enc = model.encode(&tape, p.src, true, &dropout_rng);
        Tensor logits = model.decoder_forward(&tape, enc, p.dec_in, nullptr,
                                              true, &dropout_rng);
        Tensor ce = cross_entropy(&tape, logits, p.targets, Vocabulary::kPad);
        loss = loss.data ? add(&tape, loss, ce) : ce;
      }
      loss = scale(&tape, loss, 1.0f / static_cast<float>(end - start));
      double lv = loss.value();
      if (!std::isfinite(lv)) {
        throw numeric_error("train_backbone: loss diverged to " +
                            std::to_string(lv) + " at epoch " +
                            std::to_string(epoch));
      }
      tape.backward(loss);
      opt.step(params);
      opt.zero_grad(params);
      epoch_loss += lv;
      ++n_batches;
    }
    result.epoch_loss.push_back(epoch_loss / std::max(1, n_batches));
    result.val_acc.push_back(
        valid.empty() ? 0.0 : token_accuracy(model, valid, vocab));
    result.epochs_run = epoch + 1;
    if (cfg.verbose) {
      std::cerr << "epoch " << epoch + 1 << " loss " << result.epoch_loss.back()
                << " val_acc " << result.val_acc.back() << "\n";
    }
    if (cfg.stop_at_val_acc > 0 && !valid.empty() &&
        result.val_acc.back() >= cfg.stop_at_val_acc) {
      break;
    }
  }
  return result;
}

}  // namespace vptlab
