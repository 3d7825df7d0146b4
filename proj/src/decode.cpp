#include "vpt/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "vpt/errors.hpp"

namespace vptlab {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log-softmax in doubles; mask_eos removes EOS from the distribution and
// renormalizes (only the sampling draw needs that; search code instead skips
// EOS extensions at the first content step, which preserves score order).
std::vector<double> to_log_probs(const std::vector<float>& logits,
                                 double temperature, bool mask_eos, int eos) {
  std::vector<double> lp(logits.size());
  double mx = kNegInf;
  for (size_t i = 0; i < logits.size(); ++i) {
    lp[i] = logits[i] / temperature;
    if (mask_eos && static_cast<int>(i) == eos) lp[i] = kNegInf;
    mx = std::max(mx, lp[i]);
  }
  double z = 0;
  for (double v : lp) z += std::exp(v - mx);
  double log_z = mx + std::log(z);
  for (double& v : lp) v -= log_z;
  return lp;
}

struct Hyp {
  int session = -1;
  std::vector<int> tokens;       // content tokens
  std::vector<double> logprobs;  // true per-token log-probs
  double cum = 0;                // true cumulative log-prob
  double sel = 0;                // selection score (SBS: perturbed)
  double phi = 0;                // SBS: temperature-scaled cumulative
  std::vector<double> lp;        // pending next-token log-probs, true
  std::vector<double> lp_sel;    // SBS: pending scaled log-probs
};

Candidate finish(const StepModel& m, const Hyp& h, bool eos_terminated) {
  Candidate c;
  c.tokens.reserve(h.tokens.size() + 2);
  c.tokens.push_back(m.bos);
  c.tokens.insert(c.tokens.end(), h.tokens.begin(), h.tokens.end());
  if (eos_terminated) c.tokens.push_back(m.eos);
  c.per_token_logprob = h.logprobs;
  c.total_logprob = std::accumulate(h.logprobs.begin(), h.logprobs.end(), 0.0);
  c.length = static_cast<int>(h.tokens.size());
  c.normalized_score = c.total_logprob / c.length;
  return c;
}

void release(const StepModel& m, int session) {
  if (m.release_session) m.release_session(session);
}

// Completed sequences, kept sorted best-first and trimmed to width.
struct DonePool {
  std::vector<std::pair<double, Candidate>> entries;
  int width = 1;

  void add(double key, Candidate c) {
    entries.emplace_back(key, std::move(c));
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second.tokens < b.second.tokens;
              });
    if (static_cast<int>(entries.size()) > width) entries.resize(width);
  }
  bool saturated_above(double best_live) const {
    return static_cast<int>(entries.size()) == width &&
           entries.back().first >= best_live;
  }
  std::vector<Candidate> take() {
    std::vector<Candidate> out;
    out.reserve(entries.size());
    for (auto& e : entries) out.push_back(std::move(e.second));
    return out;
  }
};

struct Ext {
  double score = 0;  // selection key
  int token = -1;
  int parent = -1;
  double true_lp = 0;
};

bool ext_less(const Ext& a, const Ext& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.token != b.token) return a.token < b.token;
  return a.parent < b.parent;
}

// Turns picks (parent index, token) into sessions for the next generation:
// a parent's first pick reuses its session, later picks clone it, and
// parents left with no picks are released.
std::vector<int> assign_sessions(const StepModel& m, std::vector<Hyp>& live,
                                 const std::vector<std::pair<int, int>>& picks) {
  std::vector<bool> used(live.size(), false);
  std::vector<int> sessions(picks.size(), -1);
  for (size_t i = 0; i < picks.size(); ++i) {
    int p = picks[i].first;
    if (!used[p]) {
      sessions[i] = live[p].session;
      used[p] = true;
    }
  }
  for (size_t i = 0; i < picks.size(); ++i) {
    if (sessions[i] < 0) {
      sessions[i] = m.clone_session(live[picks[i].first].session);
    }
  }
  for (size_t p = 0; p < live.size(); ++p) {
    if (!used[p]) release(m, live[p].session);
  }
  return sessions;
}

Hyp extend(const Hyp& parent, const Ext& e, int session) {
  Hyp h;
  h.session = session;
  h.tokens = parent.tokens;
  h.tokens.push_back(e.token);
  h.logprobs = parent.logprobs;
  h.logprobs.push_back(e.true_lp);
  h.cum = parent.cum + e.true_lp;
  h.sel = e.score;
  return h;
}

double log1mexp(double x) {  // log(1 - exp(x)) for x <= 0
  if (x >= 0) return kNegInf;
  if (x > -0.6931471805599453) return std::log(-std::expm1(x));
  return std::log1p(-std::exp(x));
}

double softplus_stable(double v) {
  if (v == kNegInf) return 0;
  return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
}

double sample_gumbel(Rng& rng) {
  double u = rng.uniform();
  if (u <= 0) u = std::numeric_limits<double>::min();
  if (u >= 1) u = 1 - 1e-16;
  return -std::log(-std::log(u));
}

}  // namespace

void DecodeConfig::validate() const {
  if (max_steps < 1) throw usage_error("DecodeConfig: max_steps must be >= 1");
  if (beam_width < 1) throw usage_error("DecodeConfig: beam_width must be >= 1");
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw usage_error("DecodeConfig: temperature must be positive");
  }
  if (dbs_groups < 1) throw usage_error("DecodeConfig: dbs_groups must be >= 1");
  if (beam_width % dbs_groups != 0) {
    throw usage_error("DecodeConfig: dbs_groups must divide beam_width");
  }
  if (dbs_lambda < 0) throw usage_error("DecodeConfig: dbs_lambda must be >= 0");
}

StepModel make_step_model(DecoderStepper& stepper, const BackboneConfig& cfg) {
  StepModel m;
  m.vocab_size = cfg.vocab_size;
  m.bos = Vocabulary::kBos;
  m.eos = Vocabulary::kEos;
  m.add_session = [&stepper](const AttentionPrefix* p) {
    return stepper.add_session(p);
  };
  m.clone_session = [&stepper](int s) { return stepper.clone_session(s); };
  m.release_session = [&stepper](int s) { stepper.release_session(s); };
  m.step = [&stepper](const std::vector<int>& s, const std::vector<int>& t) {
    return stepper.step(s, t);
  };
  return m;
}

Candidate greedy(const StepModel& m, const DecodeConfig& cfg,
                 const AttentionPrefix* prefix) {
  cfg.validate();
  Hyp h;
  h.session = m.add_session(prefix);
  auto rows = m.step({h.session}, {m.bos});
  bool finished = false;
  for (int depth = 0; depth < cfg.max_steps; ++depth) {
    auto lp = to_log_probs(rows[0], 1.0, false, m.eos);
    int best = -1;
    for (int t = 0; t < static_cast<int>(lp.size()); ++t) {
      if (t == m.eos && depth == 0) continue;
      if (best < 0 || lp[t] > lp[best]) best = t;
    }
    if (best == m.eos) {
      finished = true;
      break;
    }
    h.tokens.push_back(best);
    h.logprobs.push_back(lp[best]);
    h.cum += lp[best];
    if (depth + 1 < cfg.max_steps) rows = m.step({h.session}, {best});
  }
  release(m, h.session);
  return finish(m, h, finished);
}

std::vector<Candidate> sample(const StepModel& m, const DecodeConfig& cfg,
                              int n, Rng& rng, const AttentionPrefix* prefix) {
  cfg.validate();
  if (n < 1) throw usage_error("sample: n must be >= 1");
  std::vector<Hyp> hyps(n);
  std::vector<Candidate> out(n);
  std::vector<bool> done(n, false);
  std::vector<int> sessions, tokens;
  for (int i = 0; i < n; ++i) {
    hyps[i].session = m.add_session(prefix);
    sessions.push_back(hyps[i].session);
    tokens.push_back(m.bos);
  }
  auto rows = m.step(sessions, tokens);
  std::vector<int> row_of(n);
  std::iota(row_of.begin(), row_of.end(), 0);

  for (int depth = 0; depth < cfg.max_steps; ++depth) {
    sessions.clear();
    tokens.clear();
    std::vector<int> next_row_of;
    for (int i = 0; i < n; ++i) {
      if (done[i]) continue;
      Hyp& h = hyps[i];
      auto lp_true = to_log_probs(rows[row_of[i]], 1.0, false, m.eos);
      auto lp_draw =
          to_log_probs(rows[row_of[i]], cfg.temperature, depth == 0, m.eos);
      double u = rng.uniform();
      double acc = 0;
      int pick = -1;
      for (size_t t = 0; t < lp_draw.size(); ++t) {
        double p = std::exp(lp_draw[t]);
        if (p <= 0) continue;
        acc += p;
        pick = static_cast<int>(t);
        if (u < acc) break;
      }
      if (pick == m.eos) {
        done[i] = true;
        out[i] = finish(m, h, true);
        release(m, h.session);
        continue;
      }
      h.tokens.push_back(pick);
      h.logprobs.push_back(lp_true[pick]);
      h.cum += lp_true[pick];
      if (depth + 1 == cfg.max_steps) {
        done[i] = true;
        out[i] = finish(m, h, false);
        release(m, h.session);
        continue;
      }
      next_row_of.push_back(static_cast<int>(sessions.size()));
      sessions.push_back(h.session);
      tokens.push_back(pick);
    }
    if (sessions.empty()) break;
    rows = m.step(sessions, tokens);
    int live = 0;
    for (int i = 0; i < n; ++i) {
      if (!done[i]) row_of[i] = next_row_of[live++];
    }
  }
  return out;
}

std::vector<std::vector<Candidate>> beam_search_many(
    const StepModel& m, const DecodeConfig& cfg,
    const std::vector<const AttentionPrefix*>& prefixes) {
  cfg.validate();
  const int B = cfg.beam_width;
  const int n = static_cast<int>(prefixes.size());

  struct Search {
    std::vector<Hyp> live;
    DonePool done;
    bool active = true;
  };
  std::vector<Search> searches(n);
  std::vector<int> sessions, tokens;
  std::vector<std::pair<int, int>> row_owner;  // (search, live index)
  for (int i = 0; i < n; ++i) {
    Hyp root;
    root.session = m.add_session(prefixes[i]);
    searches[i].live.push_back(std::move(root));
    searches[i].done.width = B;
    row_owner.emplace_back(i, 0);
    sessions.push_back(searches[i].live[0].session);
    tokens.push_back(m.bos);
  }
  auto rows = m.step(sessions, tokens);
  for (size_t r = 0; r < row_owner.size(); ++r) {
    auto [si, li] = row_owner[r];
    searches[si].live[li].lp = to_log_probs(rows[r], 1.0, false, m.eos);
  }

  for (int depth = 0; depth < cfg.max_steps; ++depth) {
    sessions.clear();
    tokens.clear();
    row_owner.clear();
    for (int si = 0; si < n; ++si) {
      Search& s = searches[si];
      if (!s.active) continue;

      std::vector<Ext> exts;
      for (size_t p = 0; p < s.live.size(); ++p) {
        Hyp& h = s.live[p];
        for (int t = 0; t < static_cast<int>(h.lp.size()); ++t) {
          if (h.lp[t] == kNegInf) continue;
          if (t == m.eos) {
            if (depth > 0) s.done.add(h.cum + h.lp[t], finish(m, h, true));
            continue;
          }
          exts.push_back({h.cum + h.lp[t], t, static_cast<int>(p), h.lp[t]});
        }
      }
      std::sort(exts.begin(), exts.end(), ext_less);
      if (static_cast<int>(exts.size()) > B) exts.resize(B);

      double best_live = exts.empty() ? kNegInf : exts.front().score;
      if (exts.empty() || s.done.saturated_above(best_live)) {
        for (Hyp& h : s.live) release(m, h.session);
        s.active = false;
        continue;
      }

      std::vector<std::pair<int, int>> picks;
      for (const Ext& e : exts) picks.emplace_back(e.parent, e.token);
      std::vector<int> new_sessions = assign_sessions(m, s.live, picks);

      std::vector<Hyp> next;
      next.reserve(exts.size());
      for (size_t i = 0; i < exts.size(); ++i) {
        next.push_back(extend(s.live[exts[i].parent], exts[i], new_sessions[i]));
      }
      s.live = std::move(next);

      if (depth + 1 == cfg.max_steps) {
        for (Hyp& h : s.live) {
          s.done.add(h.cum, finish(m, h, false));
          release(m, h.session);
        }
        s.active = false;
        continue;
      }
      for (size_t i = 0; i < s.live.size(); ++i) {
        row_owner.emplace_back(si, static_cast<int>(i));
        sessions.push_back(s.live[i].session);
        tokens.push_back(s.live[i].tokens.back());
      }
    }
    if (sessions.empty()) break;
    rows = m.step(sessions, tokens);
    for (size_t r = 0; r < row_owner.size(); ++r) {
      auto [si, li] = row_owner[r];
      searches[si].live[li].lp = to_log_probs(rows[r], 1.0, false, m.eos);
    }
  }

  std::vector<std::vector<Candidate>> out;
  out.reserve(n);
  for (Search& s : searches) out.push_back(s.done.take());
  return out;
}

std::vector<Candidate> beam_search(const StepModel& m, const DecodeConfig& cfg,
                                   const AttentionPrefix* prefix) {
  return beam_search_many(m, cfg, {prefix}).front();
}

std::vector<Candidate> stochastic_beam_search(const StepModel& m,
                                              const DecodeConfig& cfg,
                                              Rng& rng) {
  cfg.validate();
  const int B = cfg.beam_width;
  const double temp = cfg.temperature;
  std::vector<Hyp> live;
  DonePool done;
  done.width = B;

  Hyp root;
  root.session = m.add_session(nullptr);
  auto rows = m.step({root.session}, {m.bos});
  root.lp = to_log_probs(rows[0], 1.0, false, m.eos);
  root.lp_sel = temp == 1.0 ? root.lp : to_log_probs(rows[0], temp, false, m.eos);
  root.sel = 0;  // a root Gumbel would shift every score equally
  live.push_back(std::move(root));

  for (int depth = 0; depth < cfg.max_steps; ++depth) {
    std::vector<Ext> keep;
    for (size_t p = 0; p < live.size(); ++p) {
      Hyp& h = live[p];
      // Perturb every child of the tempered model (per-step softmax at
      // temperature `temp`), then condition so the childrens' max recovers
      // the parent's perturbed score exactly (max-Gumbel propagation).
      std::vector<std::pair<int, double>> g;
      double z = kNegInf;
      for (int t = 0; t < static_cast<int>(h.lp_sel.size()); ++t) {
        if (h.lp_sel[t] == kNegInf) continue;
        if (t == m.eos && depth == 0) continue;
        double gv = h.phi + h.lp_sel[t] + sample_gumbel(rng);
        g.emplace_back(t, gv);
        z = std::max(z, gv);
      }
      for (auto [t, gv] : g) {
        double v = h.sel - gv + log1mexp(gv - z);
        double g_tilde = h.sel - softplus_stable(v);
        if (t == m.eos) {
          done.add(g_tilde, finish(m, h, true));
        } else {
          keep.push_back({g_tilde, t, static_cast<int>(p), h.lp[t]});
        }
      }
    }
    std::sort(keep.begin(), keep.end(), ext_less);
    if (static_cast<int>(keep.size()) > B) keep.resize(B);

    double best_live = keep.empty() ? kNegInf : keep.front().score;
    if (keep.empty() || done.saturated_above(best_live)) {
      for (Hyp& h : live) release(m, h.session);
      live.clear();
      break;
    }

    std::vector<std::pair<int, int>> picks;
    for (const Ext& e : keep) picks.emplace_back(e.parent, e.token);
    std::vector<int> new_sessions = assign_sessions(m, live, picks);

    std::vector<Hyp> next;
    next.reserve(keep.size());
    for (size_t i = 0; i < keep.size(); ++i) {
      const Hyp& par = live[keep[i].parent];
      next.push_back(extend(par, keep[i], new_sessions[i]));
      next.back().phi = par.phi + par.lp_sel[keep[i].token];
    }
    live = std::move(next);

    if (depth + 1 == cfg.max_steps) {
      for (Hyp& h : live) {
        done.add(h.sel, finish(m, h, false));
        release(m, h.session);
      }
      live.clear();
      break;
    }
    std::vector<int> step_sessions, step_tokens;
    for (Hyp& h : live) {
      step_sessions.push_back(h.session);
      step_tokens.push_back(h.tokens.back());
    }
    rows = m.step(step_sessions, step_tokens);
    for (size_t r = 0; r < live.size(); ++r) {
      live[r].lp = to_log_probs(rows[r], 1.0, false, m.eos);
      live[r].lp_sel = temp == 1.0
                           ? live[r].lp
                           : to_log_probs(rows[r], temp, false, m.eos);
    }
  }
  for (Hyp& h : live) release(m, h.session);
  return done.take();
}

std::vector<Candidate> diverse_beam_search(const StepModel& m,
                                           const DecodeConfig& cfg) {
  cfg.validate();
  const int B = cfg.beam_width;
  const int G = cfg.dbs_groups;
  const int quota = B / G;
  const double lambda = cfg.dbs_lambda;

  std::vector<Hyp> live;
  DonePool done;
  done.width = B;
  Hyp root;
  root.session = m.add_session(nullptr);
  auto rows = m.step({root.session}, {m.bos});
  root.lp = to_log_probs(rows[0], 1.0, false, m.eos);
  live.push_back(std::move(root));

  for (int depth = 0; depth < cfg.max_steps; ++depth) {
    std::vector<Ext> exts;
    for (size_t p = 0; p < live.size(); ++p) {
      Hyp& h = live[p];
      for (int t = 0; t < static_cast<int>(h.lp.size()); ++t) {
        if (h.lp[t] == kNegInf) continue;
        if (t == m.eos) {
          if (depth > 0) done.add(h.cum + h.lp[t], finish(m, h, true));
          continue;
        }
        exts.push_back({h.cum + h.lp[t], t, static_cast<int>(p), h.lp[t]});
      }
    }
    std::sort(exts.begin(), exts.end(), ext_less);

    // groups claim extensions in turn; later groups pay lambda for every
    // same-step token already picked by earlier groups
    std::vector<bool> taken(exts.size(), false);
    std::map<int, int> token_picks;
    std::vector<Ext> selected;
    for (int g = 0; g < G; ++g) {
      std::vector<Ext> group;
      for (int q = 0; q < quota; ++q) {
        int best = -1;
        double best_adj = kNegInf;
        for (size_t i = 0; i < exts.size(); ++i) {
          if (taken[i]) continue;
          auto it = token_picks.find(exts[i].token);
          double adj = exts[i].score -
                       lambda * (it == token_picks.end() ? 0 : it->second);
          // exts is pre-sorted, so on adjusted-score ties the earlier entry
          // wins: lowest token, then parent order
          if (adj > best_adj) {
            best = static_cast<int>(i);
            best_adj = adj;
          }
        }
        if (best < 0) break;
        taken[best] = true;
        group.push_back(exts[best]);
      }
      for (const Ext& e : group) ++token_picks[e.token];
      for (Ext& e : group) selected.push_back(std::move(e));
    }

    double best_live = kNegInf;
    for (const Ext& e : selected) best_live = std::max(best_live, e.score);
    if (selected.empty() || done.saturated_above(best_live)) {
      for (Hyp& h : live) release(m, h.session);
      live.clear();
      break;
    }

    std::vector<std::pair<int, int>> picks;
    for (const Ext& e : selected) picks.emplace_back(e.parent, e.token);
    std::vector<int> new_sessions = assign_sessions(m, live, picks);

    std::vector<Hyp> next;
    next.reserve(selected.size());
    for (size_t i = 0; i < selected.size(); ++i) {
      next.push_back(
          extend(live[selected[i].parent], selected[i], new_sessions[i]));
    }
    live = std::move(next);

    if (depth + 1 == cfg.max_steps) {
      for (Hyp& h : live) {
        done.add(h.cum, finish(m, h, false));
        release(m, h.session);
      }
      live.clear();
      break;
    }
    std::vector<int> step_sessions, step_tokens;
    for (Hyp& h : live) {
      step_sessions.push_back(h.session);
      step_tokens.push_back(h.tokens.back());
    }
    rows = m.step(step_sessions, step_tokens);
    for (size_t r = 0; r < live.size(); ++r) {
      live[r].lp = to_log_probs(rows[r], 1.0, false, m.eos);
    }
  }
  for (Hyp& h : live) release(m, h.session);
  return done.take();
}

std::vector<Candidate> generate_vpt_candidates(const Backbone& model,
                                               const VPTModel& vpt,
                                               const std::vector<int>& src_ids,
                                               const DecodeConfig& cfg,
                                               int n_latents, float tau,
                                               Rng& rng) {
  cfg.validate();
  if (n_latents < 1) {
    throw usage_error("generate_vpt_candidates: n_latents must be >= 1");
  }
  auto samples = vpt.sample_prior(src_ids, tau, rng, n_latents);
  auto enc = model.encode(nullptr, src_ids);
  DecoderStepper stepper(model, enc);
  StepModel m = make_step_model(stepper, model.config());

  std::vector<const AttentionPrefix*> prefixes;
  prefixes.reserve(samples.size());
  for (const auto& s : samples) prefixes.push_back(&s.prefix);
  auto per_latent = beam_search_many(m, cfg, prefixes);

  std::vector<Candidate> out;
  out.reserve(n_latents);
  for (auto& cands : per_latent) {
    if (cands.empty()) {
      throw numeric_error("generate_vpt_candidates: a latent produced no beam");
    }
    out.push_back(std::move(cands.front()));
  }
  return out;
}

std::vector<Candidate> rescore_candidates(
    const Backbone& model, const ContextualEmbeddings& enc,
    const std::vector<Candidate>& candidates, const AttentionPrefix* prefix) {
  std::vector<Candidate> out;
  out.reserve(candidates.size());
  for (const Candidate& c : candidates) {
    if (c.tokens.size() < 2 || c.tokens.front() != Vocabulary::kBos) {
      throw usage_error("rescore_candidates: candidate must start with BOS");
    }
    std::vector<int> dec_in = c.tokens;
    if (dec_in.back() == Vocabulary::kEos) dec_in.pop_back();
    if (dec_in.size() < 2) {
      throw usage_error("rescore_candidates: candidate has no content tokens");
    }
    Tensor logits = model.decoder_forward(nullptr, enc, dec_in, prefix);
    int vocab = logits.shape[1];

    Candidate r = c;
    r.per_token_logprob.clear();
    r.total_logprob = 0;
    // row t of the logits predicts dec_in[t + 1]
    for (size_t t = 0; t + 1 < dec_in.size(); ++t) {
      std::vector<float> row(vocab);
      for (int j = 0; j < vocab; ++j) {
        row[j] = logits.at(static_cast<int>(t), j);
      }
      auto lp = to_log_probs(row, 1.0, false, Vocabulary::kEos);
      r.per_token_logprob.push_back(lp[dec_in[t + 1]]);
      r.total_logprob += lp[dec_in[t + 1]];
    }
    r.length = static_cast<int>(r.per_token_logprob.size());
    r.normalized_score = r.total_logprob / r.length;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Candidate> dedupe(const std::vector<Candidate>& candidates) {
  std::vector<Candidate> out;
  std::map<std::vector<int>, size_t> seen;
  for (const Candidate& c : candidates) {
    auto [it, inserted] = seen.try_emplace(c.tokens, out.size());
    if (inserted) {
      out.push_back(c);
    } else if (c.normalized_score > out[it->second].normalized_score) {
      out[it->second] = c;
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Candidate& a, const Candidate& b) {
                     return a.normalized_score > b.normalized_score;
                   });
  return out;
}

}  // namespace vptlab
