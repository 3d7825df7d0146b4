#include "vpt/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "json.hpp"
#include "vpt/errors.hpp"
#include "vpt/rng.hpp"

namespace vptlab {
namespace {

using json = nlohmann::json;

std::string fmt_float(float v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const int v = std::stoi(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw usage_error("config: key " + key + " wants an integer, got '" +
                      value + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const uint64_t v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw usage_error("config: key " + key +
                      " wants an unsigned integer, got '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw usage_error("config: key " + key + " wants a number, got '" + value +
                      "'");
  }
}

float parse_float(const std::string& key, const std::string& value) {
  return static_cast<float>(parse_double(key, value));
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw usage_error("config: key " + key + " wants true or false, got '" +
                    value + "'");
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void apply_config_override(ExperimentConfig& cfg, const std::string& key,
                           const std::string& value) {
  if (key == "backbone.d_model") cfg.backbone.d_model = parse_int(key, value);
  else if (key == "backbone.n_layers") cfg.backbone.n_layers = parse_int(key, value);
  else if (key == "backbone.n_heads") cfg.backbone.n_heads = parse_int(key, value);
  else if (key == "backbone.d_ff") cfg.backbone.d_ff = parse_int(key, value);
  else if (key == "backbone.max_len") cfg.backbone.max_len = parse_int(key, value);
  else if (key == "backbone.dropout_rate") cfg.backbone.dropout_rate = parse_float(key, value);
  else if (key == "vpt.n_pool_tokens") cfg.vpt.n_pool_tokens = parse_int(key, value);
  else if (key == "vpt.hidden_dim") cfg.vpt.hidden_dim = parse_int(key, value);
  else if (key == "vpt.prior_sigma_train") cfg.vpt.prior_sigma_train = parse_float(key, value);
  else if (key == "vpt.inference_sigma_scale") cfg.vpt.inference_sigma_scale = parse_float(key, value);
  else if (key == "vpt.kl_cycle_len") cfg.vpt.kl_cycle_len = parse_int(key, value);
  else if (key == "vpt.kl_ramp_fraction") cfg.vpt.kl_ramp_fraction = parse_float(key, value);
  else if (key == "vpt.bn_gamma") cfg.vpt.bn_gamma = parse_float(key, value);
  else if (key == "vpt.trainable_posterior_attention") cfg.vpt.trainable_posterior_attention = parse_bool(key, value);
  else if (key == "decode.max_steps") cfg.decode.max_steps = parse_int(key, value);
  else if (key == "decode.beam_width") cfg.decode.beam_width = parse_int(key, value);
  else if (key == "decode.temperature") cfg.decode.temperature = parse_float(key, value);
  else if (key == "decode.dbs_groups") cfg.decode.dbs_groups = parse_int(key, value);
  else if (key == "decode.dbs_lambda") cfg.decode.dbs_lambda = parse_float(key, value);
  else if (key == "select.subset_size") cfg.select.subset_size = parse_int(key, value);
  else if (key == "select.pool_size") cfg.select.pool_size = parse_int(key, value);
  else if (key == "select.alpha") cfg.select.alpha = parse_double(key, value);
  else if (key == "select.beta") cfg.select.beta = parse_double(key, value);
  else if (key == "phase1.epochs") cfg.phase1.epochs = parse_int(key, value);
  else if (key == "phase1.batch_size") cfg.phase1.batch_size = parse_int(key, value);
  else if (key == "phase1.lr") cfg.phase1.lr = parse_double(key, value);
  else if (key == "phase1.stop_at_val_acc") cfg.phase1.stop_at_val_acc = parse_double(key, value);
  else if (key == "phase1.verbose") cfg.phase1.verbose = parse_bool(key, value);
  else if (key == "phase2.epochs") cfg.phase2.epochs = parse_int(key, value);
  else if (key == "phase2.batch_size") cfg.phase2.batch_size = parse_int(key, value);
  else if (key == "phase2.lr") cfg.phase2.lr = parse_double(key, value);
  else if (key == "phase2.verbose") cfg.phase2.verbose = parse_bool(key, value);
  else if (key == "run.seed") cfg.seed = parse_u64(key, value);
  else {
    throw usage_error("config: unknown key '" + key +
                      "' (see the documented key list)");
  }
}

std::map<std::string, std::string> serialize_config(const ExperimentConfig& cfg) {
  std::map<std::string, std::string> out;
  out["backbone.d_model"] = std::to_string(cfg.backbone.d_model);
  out["backbone.n_layers"] = std::to_string(cfg.backbone.n_layers);
  out["backbone.n_heads"] = std::to_string(cfg.backbone.n_heads);
  out["backbone.d_ff"] = std::to_string(cfg.backbone.d_ff);
  out["backbone.max_len"] = std::to_string(cfg.backbone.max_len);
  out["backbone.dropout_rate"] = fmt_float(cfg.backbone.dropout_rate);
  out["vpt.n_pool_tokens"] = std::to_string(cfg.vpt.n_pool_tokens);
  out["vpt.hidden_dim"] = std::to_string(cfg.vpt.hidden_dim);
  out["vpt.prior_sigma_train"] = fmt_float(cfg.vpt.prior_sigma_train);
  out["vpt.inference_sigma_scale"] = fmt_float(cfg.vpt.inference_sigma_scale);
  out["vpt.kl_cycle_len"] = std::to_string(cfg.vpt.kl_cycle_len);
  out["vpt.kl_ramp_fraction"] = fmt_float(cfg.vpt.kl_ramp_fraction);
  out["vpt.bn_gamma"] = fmt_float(cfg.vpt.bn_gamma);
  out["vpt.trainable_posterior_attention"] =
      cfg.vpt.trainable_posterior_attention ? "true" : "false";
  out["decode.max_steps"] = std::to_string(cfg.decode.max_steps);
  out["decode.beam_width"] = std::to_string(cfg.decode.beam_width);
  out["decode.temperature"] = fmt_float(cfg.decode.temperature);
  out["decode.dbs_groups"] = std::to_string(cfg.decode.dbs_groups);
  out["decode.dbs_lambda"] = fmt_float(cfg.decode.dbs_lambda);
  out["select.subset_size"] = std::to_string(cfg.select.subset_size);
  out["select.pool_size"] = std::to_string(cfg.select.pool_size);
  out["select.alpha"] = fmt_double(cfg.select.alpha);
  out["select.beta"] = fmt_double(cfg.select.beta);
  out["phase1.epochs"] = std::to_string(cfg.phase1.epochs);
  out["phase1.batch_size"] = std::to_string(cfg.phase1.batch_size);
  out["phase1.lr"] = fmt_double(cfg.phase1.lr);
  out["phase1.stop_at_val_acc"] = fmt_double(cfg.phase1.stop_at_val_acc);
  out["phase1.verbose"] = cfg.phase1.verbose ? "true" : "false";
  out["phase2.epochs"] = std::to_string(cfg.phase2.epochs);
  out["phase2.batch_size"] = std::to_string(cfg.phase2.batch_size);
  out["phase2.lr"] = fmt_double(cfg.phase2.lr);
  out["phase2.verbose"] = cfg.phase2.verbose ? "true" : "false";
  out["run.seed"] = std::to_string(cfg.seed);
  return out;
}

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [key, value] : serialize_config(ExperimentConfig{})) {
      (void)value;
      k.push_back(key);
    }
    return k;
  }();
  return keys;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw usage_error("config: cannot open " + path);
  ExperimentConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw usage_error("config: " + path + ":" + std::to_string(line_no) +
                        " is not key=value");
    }
    apply_config_override(cfg, trim(line.substr(0, eq)),
                          trim(line.substr(eq + 1)));
  }
  return cfg;
}

void atomic_write_text(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot open " + tmp + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw data_error("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw data_error("cannot rename " + tmp + " to " + path);
  }
}

void write_manifest(const std::string& path, const RunManifest& m) {
  json j;
  j["tool_version"] = kToolVersion;
  j["subcommand"] = m.subcommand;
  j["seed"] = std::to_string(m.seed);
  j["config"] = m.config;
  j["input_hashes"] = m.input_hashes;
  j["output_hashes"] = m.output_hashes;
  j["wall_clock_sec"] = m.wall_clock_sec;
  j["stage_metrics"] = m.stage_metrics;
  atomic_write_text(path, j.dump(2) + "\n");
}

TextCandidate to_text_candidate(const Candidate& c, const Vocabulary& vocab) {
  TextCandidate out;
  std::vector<int> content(c.tokens.begin() + 1, c.tokens.begin() + 1 + c.length);
  out.tokens = detokenize(vocab.decode(content));
  out.logprobs = c.per_token_logprob;
  out.score = c.normalized_score;
  return out;
}

void save_candidates(const std::string& path,
                     const std::vector<CandidateEntry>& entries) {
  std::string body;
  for (const auto& e : entries) {
    json j;
    j["id"] = e.id;
    j["strategy"] = e.strategy;
    json cands = json::array();
    for (const auto& c : e.candidates) {
      json jc;
      jc["tokens"] = c.tokens;
      jc["logprobs"] = c.logprobs;
      jc["score"] = c.score;
      cands.push_back(std::move(jc));
    }
    j["candidates"] = std::move(cands);
    if (e.has_selected) j["selected"] = e.selected;
    body += j.dump();
    body += '\n';
  }
  atomic_write_text(path, body);
}

std::vector<CandidateEntry> load_candidates(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("candidates: cannot open " + path);
  std::vector<CandidateEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw data_error("candidates: " + where + ": " + e.what());
    }
    try {
      CandidateEntry e;
      e.id = j.at("id").get<std::string>();
      e.strategy = j.at("strategy").get<std::string>();
      for (const auto& jc : j.at("candidates")) {
        TextCandidate c;
        c.tokens = jc.at("tokens").get<std::string>();
        c.logprobs = jc.at("logprobs").get<std::vector<double>>();
        c.score = jc.at("score").get<double>();
        if (tokenize(c.tokens).size() != c.logprobs.size()) {
          throw data_error("token/log-prob length mismatch");
        }
        e.candidates.push_back(std::move(c));
      }
      if (e.candidates.empty()) throw data_error("entry with no candidates");
      if (j.contains("selected")) {
        e.has_selected = true;
        e.selected = j.at("selected").get<std::vector<int>>();
        for (int idx : e.selected) {
          if (idx < 0 || idx >= static_cast<int>(e.candidates.size())) {
            throw data_error("selected index out of range");
          }
        }
      }
      out.push_back(std::move(e));
    } catch (const json::exception& e) {
      throw data_error("candidates: " + where + ": " + e.what());
    } catch (const data_error& e) {
      throw data_error("candidates: " + where + ": " + e.what());
    }
  }
  return out;
}

namespace {

CandidateEntry decode_one(const Backbone& model, const VPTModel* vpt_model,
                          const Vocabulary& vocab, const Example& ex,
                          const DecodeConfig& cfg, const GenerateOptions& opts,
                          Rng rng) {
  CandidateEntry entry;
  entry.id = ex.id;
  entry.strategy = opts.strategy;

  const auto src_ids =
      to_source_ids(vocab, ex.code, model.config().max_len);
  std::vector<Candidate> cands;
  if (opts.strategy == "vpt") {
    cands = generate_vpt_candidates(model, *vpt_model, src_ids, cfg, opts.n,
                                    opts.tau, rng);
    const auto enc = model.encode(nullptr, src_ids);
    cands = dedupe(rescore_candidates(model, enc, cands));
  } else {
    const auto enc = model.encode(nullptr, src_ids);
    DecoderStepper stepper(model, enc);
    const StepModel m = make_step_model(stepper, model.config());
    if (opts.strategy == "greedy") {
      cands.push_back(greedy(m, cfg));
    } else if (opts.strategy == "sample") {
      cands = sample(m, cfg, opts.n, rng);
    } else if (opts.strategy == "beam") {
      cands = beam_search(m, cfg);
    } else if (opts.strategy == "sbs") {
      cands = stochastic_beam_search(m, cfg, rng);
    } else if (opts.strategy == "dbs") {
      cands = diverse_beam_search(m, cfg);
    }
  }
  for (const auto& c : cands) {
    entry.candidates.push_back(to_text_candidate(c, vocab));
  }
  return entry;
}

}  // namespace

std::vector<CandidateEntry> generate_candidates(
    const Backbone& model, const VPTModel* vpt_model, const Vocabulary& vocab,
    const std::vector<Example>& split, const DecodeConfig& base_decode,
    const GenerateOptions& opts) {
  static const std::vector<std::string> kStrategies = {
      "greedy", "sample", "beam", "sbs", "dbs", "vpt"};
  if (std::find(kStrategies.begin(), kStrategies.end(), opts.strategy) ==
      kStrategies.end()) {
    throw usage_error(
        "generate: unknown strategy '" + opts.strategy +
        "' (choose one of greedy, sample, beam, sbs, dbs, vpt)");
  }
  if (opts.strategy == "vpt" && vpt_model == nullptr) {
    throw usage_error("generate: strategy vpt needs a checkpoint with the "
                      "variational prefix component");
  }
  if (opts.n < 1) throw usage_error("generate: n must be >= 1");
  if (opts.threads < 1) throw usage_error("generate: threads must be >= 1");

  DecodeConfig cfg = base_decode;
  cfg.beam_width = opts.beam;
  cfg.temperature = opts.temperature;
  cfg.seed = opts.seed;
  cfg.validate();

  const Rng master(opts.seed);
  std::vector<CandidateEntry> out(split.size());
  std::atomic<size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;

  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= split.size()) return;
      try {
        out[i] = decode_one(model, vpt_model, vocab, split[i], cfg, opts,
                            master.fork(static_cast<uint64_t>(i)));
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  if (opts.threads == 1 || split.size() <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    const int n_threads =
        std::min<int>(opts.threads, static_cast<int>(split.size()));
    pool.reserve(static_cast<size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

MetricReport evaluate_candidates(const std::vector<CandidateEntry>& entries,
                                 const std::vector<Example>& corpus_split) {
  if (entries.empty()) throw data_error("evaluate: empty candidate file");
  std::unordered_map<std::string, const Example*> by_id;
  for (const auto& ex : corpus_split) by_id[ex.id] = &ex;

  MetricReport r;
  r.strategy = entries.front().strategy;
  double sum_bleu = 0, sum_rouge = 0, sum_meteor = 0, sum_count = 0;
  double sum_d1 = 0, sum_d2 = 0, sum_sb = 0;
  int n_d1 = 0, n_d2 = 0, n_sb = 0;
  for (const auto& e : entries) {
    const auto it = by_id.find(e.id);
    if (it == by_id.end()) {
      throw data_error("evaluate: id " + e.id + " is not in the corpus split");
    }
    const Example& ex = *it->second;

    std::vector<TokenSeq> set;
    if (e.has_selected) {
      r.used_selected = true;
      for (int idx : e.selected) {
        set.push_back(tokenize(e.candidates[idx].tokens));
      }
    } else {
      for (const auto& c : e.candidates) set.push_back(tokenize(c.tokens));
    }
    if (set.empty()) {
      throw data_error("evaluate: id " + e.id + " has an empty candidate set");
    }

    PerExampleMetrics pm;
    pm.id = e.id;
    pm.n_candidates = static_cast<int>(set.size());
    pm.oracle_bleu4 = oracle_score(set, ex.refs, bleu4);
    pm.oracle_rouge_l = oracle_score(set, ex.refs, rouge_l);
    pm.oracle_meteor = oracle_score(set, ex.refs, meteor_lite);
    sum_bleu += pm.oracle_bleu4;
    sum_rouge += pm.oracle_rouge_l;
    sum_meteor += pm.oracle_meteor;
    sum_count += pm.n_candidates;
    if (auto d1 = distinct_n(set, 1)) {
      sum_d1 += *d1;
      ++n_d1;
    }
    if (auto d2 = distinct_n(set, 2)) {
      sum_d2 += *d2;
      ++n_d2;
    }
    if (set.size() >= 2) {
      sum_sb += self_bleu(set);
      ++n_sb;
    }
    r.per_example.push_back(std::move(pm));
  }
  r.n_examples = static_cast<int>(entries.size());
  r.mean_candidates = sum_count / r.n_examples;
  r.oracle_bleu4 = sum_bleu / r.n_examples;
  r.oracle_rouge_l = sum_rouge / r.n_examples;
  r.oracle_meteor = sum_meteor / r.n_examples;
  if (n_d1 > 0) r.distinct1 = sum_d1 / n_d1;
  if (n_d2 > 0) r.distinct2 = sum_d2 / n_d2;
  if (n_sb > 0) r.self_bleu = sum_sb / n_sb;
  return r;
}

void write_metric_report(const std::string& path, const MetricReport& r) {
  json j;
  j["tool_version"] = kToolVersion;
  j["strategy"] = r.strategy;
  j["used_selected"] = r.used_selected;
  j["n_examples"] = r.n_examples;
  j["mean_candidates"] = r.mean_candidates;
  j["oracle_bleu4"] = r.oracle_bleu4;
  j["oracle_rouge_l"] = r.oracle_rouge_l;
  j["oracle_meteor"] = r.oracle_meteor;
  j["distinct1"] = r.distinct1 ? json(*r.distinct1) : json(nullptr);
  j["distinct2"] = r.distinct2 ? json(*r.distinct2) : json(nullptr);
  j["self_bleu"] = r.self_bleu ? json(*r.self_bleu) : json(nullptr);
  json per = json::array();
  for (const auto& pm : r.per_example) {
    json jp;
    jp["id"] = pm.id;
    jp["oracle_bleu4"] = pm.oracle_bleu4;
    jp["oracle_rouge_l"] = pm.oracle_rouge_l;
    jp["oracle_meteor"] = pm.oracle_meteor;
    jp["n_candidates"] = pm.n_candidates;
    per.push_back(std::move(jp));
  }
  j["per_example"] = std::move(per);
  atomic_write_text(path, j.dump(2) + "\n");
}

MetricReport load_metric_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("report: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  json j;
  try {
    j = json::parse(buf.str());
  } catch (const json::exception& e) {
    throw data_error("report: " + path + ": " + e.what());
  }
  try {
    MetricReport r;
    r.strategy = j.at("strategy").get<std::string>();
    r.used_selected = j.at("used_selected").get<bool>();
    r.n_examples = j.at("n_examples").get<int>();
    r.mean_candidates = j.at("mean_candidates").get<double>();
    r.oracle_bleu4 = j.at("oracle_bleu4").get<double>();
    r.oracle_rouge_l = j.at("oracle_rouge_l").get<double>();
    r.oracle_meteor = j.at("oracle_meteor").get<double>();
    if (!j.at("distinct1").is_null()) r.distinct1 = j["distinct1"].get<double>();
    if (!j.at("distinct2").is_null()) r.distinct2 = j["distinct2"].get<double>();
    if (!j.at("self_bleu").is_null()) r.self_bleu = j["self_bleu"].get<double>();
    for (const auto& jp : j.at("per_example")) {
      PerExampleMetrics pm;
      pm.id = jp.at("id").get<std::string>();
      pm.oracle_bleu4 = jp.at("oracle_bleu4").get<double>();
      pm.oracle_rouge_l = jp.at("oracle_rouge_l").get<double>();
      pm.oracle_meteor = jp.at("oracle_meteor").get<double>();
      pm.n_candidates = jp.at("n_candidates").get<int>();
      r.per_example.push_back(std::move(pm));
    }
    return r;
  } catch (const json::exception& e) {
    throw data_error("report: " + path + ": " + e.what());
  }
}

std::string format_metric_table(const MetricReport& r) {
  std::ostringstream out;
  auto row = [&out](const std::string& name, const std::string& value) {
    out << "  " << name;
    for (size_t i = name.size(); i < 18; ++i) out << ' ';
    out << value << '\n';
  };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  out << "strategy " << r.strategy
      << (r.used_selected ? " (selected subset)" : "") << ", " << r.n_examples
      << " examples, mean set size " << num(r.mean_candidates) << '\n';
  row("oracle BLEU-4", num(r.oracle_bleu4));
  row("oracle ROUGE-L", num(r.oracle_rouge_l));
  row("oracle METEOR", num(r.oracle_meteor));
  row("Distinct-1", r.distinct1 ? num(*r.distinct1) : "n/a");
  row("Distinct-2", r.distinct2 ? num(*r.distinct2) : "n/a");
  row("Self-BLEU", r.self_bleu ? num(*r.self_bleu) : "n/a");
  return out.str();
}

CompareResult compare_reports(const MetricReport& a, const MetricReport& b,
                              const std::string& metric) {
  auto pick = [&metric](const PerExampleMetrics& pm) {
    if (metric == "oracle_bleu4") return pm.oracle_bleu4;
    if (metric == "oracle_rouge_l") return pm.oracle_rouge_l;
    if (metric == "oracle_meteor") return pm.oracle_meteor;
    throw usage_error("compare: unknown metric '" + metric +
                      "' (oracle_bleu4, oracle_rouge_l, oracle_meteor)");
  };
  std::unordered_map<std::string, double> b_by_id;
  for (const auto& pm : b.per_example) b_by_id[pm.id] = pick(pm);
  if (a.per_example.empty()) throw data_error("compare: report A has no per-example values");
  if (a.per_example.size() != b.per_example.size()) {
    throw data_error("compare: reports cover different example counts");
  }
  CompareResult r;
  r.metric = metric;
  std::vector<double> deltas;
  for (const auto& pm : a.per_example) {
    const auto it = b_by_id.find(pm.id);
    if (it == b_by_id.end()) {
      throw data_error("compare: id " + pm.id + " is missing from report B");
    }
    const double va = pick(pm);
    const double vb = it->second;
    deltas.push_back(va - vb);
    r.mean_a += va;
    r.mean_b += vb;
  }
  r.n_pairs = static_cast<int>(deltas.size());
  r.mean_a /= r.n_pairs;
  r.mean_b /= r.n_pairs;
  r.mean_delta = r.mean_a - r.mean_b;
  r.wilcoxon = wilcoxon_signed_rank(deltas);
  return r;
}

void write_compare_result(const std::string& path, const CompareResult& r) {
  json j;
  j["tool_version"] = kToolVersion;
  j["metric"] = r.metric;
  j["n_pairs"] = r.n_pairs;
  j["n_effective"] = r.wilcoxon.n_effective;
  j["statistic"] = r.wilcoxon.statistic;
  j["p_value"] = r.wilcoxon.p_value;
  j["significant_at_005"] = r.wilcoxon.significant_at_005;
  j["exact"] = r.wilcoxon.exact;
  j["mean_a"] = r.mean_a;
  j["mean_b"] = r.mean_b;
  j["mean_delta"] = r.mean_delta;
  atomic_write_text(path, j.dump(2) + "\n");
}

}  // namespace vptlab
