#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vpt/checkpoint.hpp"
#include "vpt/errors.hpp"
#include "vpt/experiment.hpp"

namespace vptlab {
namespace {

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

std::string hash_hex(const std::string& path) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(file_hash(path)));
  return buf;
}

std::string split_path(const std::string& dir, const std::string& split) {
  return dir + "/" + split + ".jsonl";
}

std::vector<Example> load_split(const std::string& dir,
                                const std::string& split) {
  if (split != "train" && split != "valid" && split != "test") {
    throw usage_error("split must be train, valid, or test, got '" + split +
                      "'");
  }
  return load_jsonl(split_path(dir, split)).examples;
}

ExperimentConfig make_config(const std::string& config_path,
                             const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  if (!config_path.empty()) cfg = load_experiment_config(config_path);
  for (const auto& kv : overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw usage_error("--set wants key=value, got '" + kv + "'");
    }
    apply_config_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

int env_threads() {
  const char* env = std::getenv("VPT_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  try {
    size_t pos = 0;
    const int v = std::stoi(env, &pos);
    if (pos != std::string(env).size() || v < 1) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw usage_error(std::string("VPT_THREADS must be a positive integer, "
                                  "got '") +
                      env + "'");
  }
}

std::string vocab_meta(const Vocabulary& vocab) {
  std::string joined;
  for (int i = 0; i < vocab.size(); ++i) {
    if (i > 0) joined += ' ';
    joined += vocab.token(i);
  }
  return joined;
}

Vocabulary vocab_from_meta(const CheckpointData& data) {
  const auto it = data.meta.find("vocab");
  if (it == data.meta.end()) {
    throw data_error("checkpoint has no vocab entry");
  }
  return Vocabulary::from_tokens(tokenize(it->second));
}

std::string csv_cell(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct GenCorpusCmd {
  uint64_t seed = 11;
  int n = 0;
  int refs = 3;
  std::string out;
};

int run_gen_corpus(const GenCorpusCmd& c) {
  Timer timer;
  if (c.n < 1) throw usage_error("gen-corpus: --n must be >= 1");
  if (c.refs < 1) throw usage_error("gen-corpus: --refs must be >= 1");
  GrammarParams params;
  params.n_refs = c.refs;
  const CorpusSplits splits = generate_corpus(c.seed, c.n, params);

  std::filesystem::create_directories(c.out);
  RunManifest m;
  m.subcommand = "gen-corpus";
  m.seed = c.seed;
  m.config["n"] = std::to_string(c.n);
  m.config["refs"] = std::to_string(c.refs);
  const std::vector<std::pair<std::string, const std::vector<Example>*>> parts =
      {{"train", &splits.train},
       {"valid", &splits.valid},
       {"test", &splits.test}};
  for (const auto& [name, examples] : parts) {
    const std::string path = split_path(c.out, name);
    save_jsonl(path + ".tmp", *examples);
    if (std::rename((path + ".tmp").c_str(), path.c_str()) != 0) {
      throw data_error("cannot rename " + path + ".tmp");
    }
    m.output_hashes[path] = hash_hex(path);
    m.stage_metrics["n_" + name] = static_cast<double>(examples->size());
  }
  m.wall_clock_sec = timer.seconds();
  write_manifest(c.out + "/corpus.manifest.json", m);
  std::cout << "wrote " << splits.train.size() << " train / "
            << splits.valid.size() << " valid / " << splits.test.size()
            << " test examples to " << c.out << "\n";
  return 0;
}

struct TrainBackboneCmd {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string corpus;
  std::string out_ckpt;
};

int run_train_backbone(const TrainBackboneCmd& c) {
  Timer timer;
  const ExperimentConfig cfg = make_config(c.config_path, c.overrides);
  const auto train = load_split(c.corpus, "train");
  const auto valid = load_split(c.corpus, "valid");
  if (train.empty()) throw data_error("train split is empty");
  const Vocabulary vocab = Vocabulary::build(train);

  BackboneConfig bc = cfg.backbone;
  bc.vocab_size = vocab.size();
  bc.validate();
  Backbone model(bc, cfg.seed);

  TrainConfig tc = cfg.phase1;
  tc.seed = cfg.seed;
  const TrainResult result = train_backbone(model, train, valid, vocab, tc);

  auto meta = serialize_config(cfg);
  meta["vocab"] = vocab_meta(vocab);
  model.save(c.out_ckpt, meta);

  std::string csv = "epoch,loss,val_acc\n";
  for (size_t i = 0; i < result.epoch_loss.size(); ++i) {
    csv += std::to_string(i + 1) + "," + csv_cell(result.epoch_loss[i]) + "," +
           csv_cell(result.val_acc[i]) + "\n";
  }
  const std::string csv_path = c.out_ckpt + ".loss.csv";
  atomic_write_text(csv_path, csv);

  RunManifest m;
  m.subcommand = "train-backbone";
  m.seed = cfg.seed;
  m.config = serialize_config(cfg);
  m.input_hashes[split_path(c.corpus, "train")] =
      hash_hex(split_path(c.corpus, "train"));
  m.input_hashes[split_path(c.corpus, "valid")] =
      hash_hex(split_path(c.corpus, "valid"));
  m.output_hashes[c.out_ckpt] = hash_hex(c.out_ckpt);
  m.output_hashes[csv_path] = hash_hex(csv_path);
  m.stage_metrics["epochs_run"] = result.epochs_run;
  m.stage_metrics["final_loss"] = result.epoch_loss.back();
  m.stage_metrics["final_val_acc"] = result.val_acc.back();
  m.wall_clock_sec = timer.seconds();
  write_manifest(c.out_ckpt + ".manifest.json", m);

  std::cout << "backbone trained: " << result.epochs_run
            << " epochs, val token accuracy "
            << csv_cell(result.val_acc.back()) << "\n";
  return 0;
}

struct TrainVptCmd {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string backbone_ckpt;
  std::string corpus;
  std::string out_ckpt;
};

int run_train_vpt(const TrainVptCmd& c) {
  Timer timer;
  const ExperimentConfig cfg = make_config(c.config_path, c.overrides);
  const CheckpointData data = load_checkpoint(c.backbone_ckpt);
  Backbone model = Backbone::load(data);
  const Vocabulary vocab = vocab_from_meta(data);
  const auto train = load_split(c.corpus, "train");
  const auto valid = load_split(c.corpus, "valid");

  model.set_trainable(false);
  VPTConfig vc = cfg.vpt;
  vc.validate();
  VPTModel vpt(model, vc, cfg.seed);

  const double ratio =
      static_cast<double>(vpt.param_count()) /
      static_cast<double>(vpt.param_count() + model.param_count());
  std::cout << "trainable parameters: " << vpt.param_count() << " of "
            << vpt.param_count() + model.param_count() << " ("
            << csv_cell(ratio * 100.0) << "%)\n";

  VptTrainConfig tc = cfg.phase2;
  tc.seed = cfg.seed;
  const VptTrainResult result = train_vpt(model, vpt, train, vocab, tc);
  const VptEvalStats stats = eval_vpt(model, vpt, valid, vocab);

  CheckpointData out;
  out.meta = serialize_config(cfg);
  out.meta["vocab"] = vocab_meta(vocab);
  model.append_to(out);
  vpt.append_to(out);
  save_checkpoint(c.out_ckpt, out);

  std::string csv = "epoch,recon,kl\n";
  for (size_t i = 0; i < result.recon_curve.size(); ++i) {
    csv += std::to_string(i + 1) + "," + csv_cell(result.recon_curve[i]) +
           "," + csv_cell(result.kl_curve[i]) + "\n";
  }
  const std::string csv_path = c.out_ckpt + ".curves.csv";
  atomic_write_text(csv_path, csv);

  RunManifest m;
  m.subcommand = "train-vpt";
  m.seed = cfg.seed;
  m.config = serialize_config(cfg);
  m.input_hashes[c.backbone_ckpt] = hash_hex(c.backbone_ckpt);
  m.input_hashes[split_path(c.corpus, "train")] =
      hash_hex(split_path(c.corpus, "train"));
  m.input_hashes[split_path(c.corpus, "valid")] =
      hash_hex(split_path(c.corpus, "valid"));
  m.output_hashes[c.out_ckpt] = hash_hex(c.out_ckpt);
  m.output_hashes[csv_path] = hash_hex(csv_path);
  m.stage_metrics["trainable_ratio"] = ratio;
  m.stage_metrics["steps_run"] = static_cast<double>(result.steps_run);
  m.stage_metrics["final_recon"] = result.recon_curve.back();
  m.stage_metrics["final_kl"] = result.kl_curve.back();
  m.stage_metrics["valid_recon"] = stats.mean_recon;
  m.stage_metrics["valid_kl"] = stats.mean_kl;
  m.wall_clock_sec = timer.seconds();
  write_manifest(c.out_ckpt + ".manifest.json", m);

  std::cout << "vpt trained: " << result.steps_run << " steps, valid recon "
            << csv_cell(stats.mean_recon) << ", valid KL "
            << csv_cell(stats.mean_kl) << " nats\n";
  return 0;
}

struct GenerateCmd {
  std::string ckpt;
  std::string corpus;
  std::string split = "test";
  std::string config_path;
  std::vector<std::string> overrides;
  std::string strategy = "vpt";
  int n = -1;
  int beam = -1;
  double tau = 1.0;
  double temperature = 1.0;
  uint64_t seed = 0;
  int threads = 0;
  std::string out;
};

int run_generate(const GenerateCmd& c) {
  Timer timer;
  const ExperimentConfig cfg = make_config(c.config_path, c.overrides);
  const CheckpointData data = load_checkpoint(c.ckpt);
  const Backbone model = Backbone::load(data);
  const Vocabulary vocab = vocab_from_meta(data);
  std::optional<VPTModel> vpt;
  if (data.tensors.count("vpt/prior_pool") > 0) {
    vpt.emplace(VPTModel::load(data, model));
  }
  const auto split = load_split(c.corpus, c.split);
  if (split.empty()) throw data_error("split " + c.split + " is empty");

  GenerateOptions opts;
  opts.strategy = c.strategy;
  opts.n = c.n >= 1 ? c.n : (c.strategy == "vpt" ? 100 : 10);
  opts.beam = c.beam >= 1 ? c.beam : (c.strategy == "vpt" ? 4 : 10);
  opts.tau = static_cast<float>(c.tau);
  opts.temperature = static_cast<float>(c.temperature);
  opts.seed = c.seed;
  opts.threads = c.threads >= 1 ? c.threads : env_threads();

  const auto entries = generate_candidates(
      model, vpt ? &*vpt : nullptr, vocab, split, cfg.decode, opts);
  save_candidates(c.out, entries);

  double total = 0;
  for (const auto& e : entries) total += e.candidates.size();
  RunManifest m;
  m.subcommand = "generate";
  m.seed = c.seed;
  m.config = serialize_config(cfg);
  m.config["generate.strategy"] = opts.strategy;
  m.config["generate.n"] = std::to_string(opts.n);
  m.config["generate.beam"] = std::to_string(opts.beam);
  m.config["generate.tau"] = csv_cell(c.tau);
  m.config["generate.temperature"] = csv_cell(c.temperature);
  m.config["generate.split"] = c.split;
  m.input_hashes[c.ckpt] = hash_hex(c.ckpt);
  m.input_hashes[split_path(c.corpus, c.split)] =
      hash_hex(split_path(c.corpus, c.split));
  m.output_hashes[c.out] = hash_hex(c.out);
  m.stage_metrics["n_examples"] = static_cast<double>(entries.size());
  m.stage_metrics["mean_candidates"] = total / entries.size();
  m.wall_clock_sec = timer.seconds();
  write_manifest(c.out + ".manifest.json", m);

  std::cout << "decoded " << entries.size() << " examples with strategy "
            << opts.strategy << ", mean " << csv_cell(total / entries.size())
            << " candidates -> " << c.out << "\n";
  return 0;
}

struct SelectCmd {
  std::string candidates;
  int subset_size = 10;
  double alpha = 1.0;
  double beta = 1.0;
  std::string out;
};

// Candidates rebuilt from text keep selection self-contained: token strings
// are interned per entry (BLEU only ever compares within one entry), and the
// stored per-token scores carry the quality term.
Candidate intern_candidate(const TextCandidate& tc,
                           std::map<std::string, int>& ids) {
  Candidate c;
  c.tokens.push_back(1);
  for (const auto& tok : tokenize(tc.tokens)) {
    const auto [it, inserted] =
        ids.emplace(tok, static_cast<int>(ids.size()) + 5);
    (void)inserted;
    c.tokens.push_back(it->second);
  }
  c.tokens.push_back(2);
  c.per_token_logprob = tc.logprobs;
  c.length = static_cast<int>(c.tokens.size()) - 2;
  for (double lp : tc.logprobs) c.total_logprob += lp;
  c.normalized_score = c.length > 0 ? c.total_logprob / c.length : 0.0;
  return c;
}

int run_select(const SelectCmd& c) {
  Timer timer;
  auto entries = load_candidates(c.candidates);
  if (entries.empty()) throw data_error("select: empty candidate file");

  double sum_pool = 0, sum_unique = 0, sum_objective = 0;
  for (auto& e : entries) {
    // unique token strings, each represented by its best-scored occurrence
    std::map<std::string, int> best;
    for (size_t i = 0; i < e.candidates.size(); ++i) {
      const auto [it, inserted] =
          best.emplace(e.candidates[i].tokens, static_cast<int>(i));
      if (!inserted &&
          e.candidates[i].score > e.candidates[it->second].score) {
        it->second = static_cast<int>(i);
      }
    }
    std::vector<int> reps;
    for (size_t i = 0; i < e.candidates.size(); ++i) {
      const auto it = best.find(e.candidates[i].tokens);
      if (it->second == static_cast<int>(i)) reps.push_back(it->second);
    }

    std::map<std::string, int> ids;
    std::vector<Candidate> pool;
    for (int rep : reps) pool.push_back(intern_candidate(e.candidates[rep], ids));

    SelectionConfig sc;
    sc.subset_size = c.subset_size;
    sc.pool_size = std::max<int>(c.subset_size, static_cast<int>(pool.size()));
    sc.alpha = c.alpha;
    sc.beta = c.beta;
    const SelectionResult res = greedy_select(pool, sc);

    e.selected.clear();
    for (int idx : res.chosen) e.selected.push_back(reps[idx]);
    e.has_selected = true;
    sum_pool += e.candidates.size();
    sum_unique += pool.size();
    sum_objective += res.objective_value;
  }
  save_candidates(c.out, entries);

  RunManifest m;
  m.subcommand = "select";
  m.config["subset_size"] = std::to_string(c.subset_size);
  m.config["alpha"] = csv_cell(c.alpha);
  m.config["beta"] = csv_cell(c.beta);
  m.input_hashes[c.candidates] = hash_hex(c.candidates);
  m.output_hashes[c.out] = hash_hex(c.out);
  m.stage_metrics["n_examples"] = static_cast<double>(entries.size());
  m.stage_metrics["mean_pool"] = sum_pool / entries.size();
  m.stage_metrics["mean_unique"] = sum_unique / entries.size();
  m.stage_metrics["mean_objective"] = sum_objective / entries.size();
  m.wall_clock_sec = timer.seconds();
  write_manifest(c.out + ".manifest.json", m);

  std::cout << "selected " << c.subset_size << " of mean "
            << csv_cell(sum_unique / entries.size())
            << " unique candidates per example -> " << c.out << "\n";
  return 0;
}

struct EvaluateCmd {
  std::string candidates;
  std::string corpus;
  std::string split = "test";
  std::string out;
};

int run_evaluate(const EvaluateCmd& c) {
  Timer timer;
  const auto entries = load_candidates(c.candidates);
  const auto split = load_split(c.corpus, c.split);
  const MetricReport report = evaluate_candidates(entries, split);
  write_metric_report(c.out, report);

  RunManifest m;
  m.subcommand = "evaluate";
  m.config["split"] = c.split;
  m.input_hashes[c.candidates] = hash_hex(c.candidates);
  m.input_hashes[split_path(c.corpus, c.split)] =
      hash_hex(split_path(c.corpus, c.split));
  m.output_hashes[c.out] = hash_hex(c.out);
  m.stage_metrics["n_examples"] = report.n_examples;
  m.stage_metrics["oracle_bleu4"] = report.oracle_bleu4;
  m.stage_metrics["oracle_rouge_l"] = report.oracle_rouge_l;
  m.stage_metrics["oracle_meteor"] = report.oracle_meteor;
  if (report.self_bleu) m.stage_metrics["self_bleu"] = *report.self_bleu;
  m.wall_clock_sec = timer.seconds();
  write_manifest(c.out + ".manifest.json", m);

  std::cout << format_metric_table(report);
  return 0;
}

struct CompareCmd {
  std::string report_a;
  std::string report_b;
  std::string metric = "oracle_bleu4";
  std::string out;
};

int run_compare(const CompareCmd& c) {
  Timer timer;
  const MetricReport a = load_metric_report(c.report_a);
  const MetricReport b = load_metric_report(c.report_b);
  const CompareResult res = compare_reports(a, b, c.metric);
  write_compare_result(c.out, res);

  RunManifest m;
  m.subcommand = "compare";
  m.config["metric"] = c.metric;
  m.input_hashes[c.report_a] = hash_hex(c.report_a);
  m.input_hashes[c.report_b] = hash_hex(c.report_b);
  m.output_hashes[c.out] = hash_hex(c.out);
  m.stage_metrics["p_value"] = res.wilcoxon.p_value;
  m.stage_metrics["mean_delta"] = res.mean_delta;
  m.wall_clock_sec = timer.seconds();
  write_manifest(c.out + ".manifest.json", m);

  std::cout << c.metric << ": " << a.strategy << " mean "
            << csv_cell(res.mean_a) << " vs " << b.strategy << " mean "
            << csv_cell(res.mean_b) << ", one-sided Wilcoxon p = "
            << csv_cell(res.wilcoxon.p_value)
            << (res.wilcoxon.exact ? " (exact)" : " (normal approximation)")
            << " over " << res.wilcoxon.n_effective << " nonzero pairs\n";
  return 0;
}

}  // namespace

int vptlab_main(const std::vector<std::string>& args) {
  CLI::App app{"variational prefix tuning laboratory"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(0, 1);

  GenCorpusCmd gen_corpus;
  auto* sc_corpus = app.add_subcommand(
      "gen-corpus", "generate the synthetic multi-reference corpus");
  sc_corpus->add_option("--seed", gen_corpus.seed, "corpus seed");
  sc_corpus->add_option("--n", gen_corpus.n, "total example count")
      ->required();
  sc_corpus->add_option("--refs", gen_corpus.refs, "references per example");
  sc_corpus->add_option("--out", gen_corpus.out, "output directory")
      ->required();

  TrainBackboneCmd train_bb;
  auto* sc_train_bb =
      app.add_subcommand("train-backbone", "phase 1: train the backbone");
  sc_train_bb->add_option("--config", train_bb.config_path, "key=value file");
  sc_train_bb->add_option("--set", train_bb.overrides,
                          "config override key=value");
  sc_train_bb->add_option("--corpus", train_bb.corpus, "corpus directory")
      ->required();
  sc_train_bb->add_option("--out-ckpt", train_bb.out_ckpt, "checkpoint path")
      ->required();

  TrainVptCmd train_vpt_cmd;
  auto* sc_train_vpt = app.add_subcommand(
      "train-vpt", "phase 2: train the variational prefix component");
  sc_train_vpt->add_option("--config", train_vpt_cmd.config_path,
                           "key=value file");
  sc_train_vpt->add_option("--set", train_vpt_cmd.overrides,
                           "config override key=value");
  sc_train_vpt
      ->add_option("--backbone-ckpt", train_vpt_cmd.backbone_ckpt,
                   "phase 1 checkpoint")
      ->required();
  sc_train_vpt->add_option("--corpus", train_vpt_cmd.corpus,
                           "corpus directory")
      ->required();
  sc_train_vpt
      ->add_option("--out-ckpt", train_vpt_cmd.out_ckpt,
                   "combined checkpoint path")
      ->required();

  GenerateCmd generate;
  auto* sc_generate =
      app.add_subcommand("generate", "decode candidate sets for a split");
  sc_generate->add_option("--ckpt", generate.ckpt, "checkpoint path")
      ->required();
  sc_generate->add_option("--corpus", generate.corpus, "corpus directory")
      ->required();
  sc_generate->add_option("--split", generate.split, "train, valid, or test");
  sc_generate->add_option("--config", generate.config_path, "key=value file");
  sc_generate->add_option("--set", generate.overrides,
                          "config override key=value");
  sc_generate->add_option(
      "--strategy", generate.strategy,
      "greedy, sample, beam, sbs, dbs, or vpt");
  sc_generate->add_option("--n", generate.n,
                          "draws (sample) or prior latents (vpt)");
  sc_generate->add_option("--beam", generate.beam, "beam width");
  sc_generate->add_option("--tau", generate.tau, "prior sigma scale (vpt)");
  sc_generate->add_option("--temp", generate.temperature,
                          "softmax temperature (sample, sbs)");
  sc_generate->add_option("--seed", generate.seed, "decode seed");
  sc_generate->add_option("--threads", generate.threads,
                          "worker threads (default VPT_THREADS or 1)");
  sc_generate->add_option("--out", generate.out, "candidate file")
      ->required();

  SelectCmd select;
  auto* sc_select = app.add_subcommand(
      "select", "pick a quality/diversity subset per example");
  sc_select->add_option("--candidates", select.candidates, "candidate file")
      ->required();
  sc_select->add_option("--U,--subset-size", select.subset_size,
                        "subset size");
  sc_select->add_option("--alpha", select.alpha, "quality weight");
  sc_select->add_option("--beta", select.beta, "diversity weight");
  sc_select->add_option("--out", select.out, "annotated candidate file")
      ->required();

  EvaluateCmd evaluate;
  auto* sc_evaluate =
      app.add_subcommand("evaluate", "score candidate sets against a split");
  sc_evaluate->add_option("--candidates", evaluate.candidates,
                          "candidate file")
      ->required();
  sc_evaluate->add_option("--corpus", evaluate.corpus, "corpus directory")
      ->required();
  sc_evaluate->add_option("--split", evaluate.split, "train, valid, or test");
  sc_evaluate->add_option("--out", evaluate.out, "metric report path")
      ->required();

  CompareCmd compare;
  auto* sc_compare = app.add_subcommand(
      "compare", "paired one-sided Wilcoxon test between two reports");
  sc_compare->add_option("--report-a", compare.report_a, "metric report A")
      ->required();
  sc_compare->add_option("--report-b", compare.report_b, "metric report B")
      ->required();
  sc_compare->add_option("--metric", compare.metric,
                         "oracle_bleu4, oracle_rouge_l, or oracle_meteor");
  sc_compare->add_option("--out", compare.out, "comparison result path")
      ->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sc_corpus->parsed()) return run_gen_corpus(gen_corpus);
    if (sc_train_bb->parsed()) return run_train_backbone(train_bb);
    if (sc_train_vpt->parsed()) return run_train_vpt(train_vpt_cmd);
    if (sc_generate->parsed()) return run_generate(generate);
    if (sc_select->parsed()) return run_select(select);
    if (sc_evaluate->parsed()) return run_evaluate(evaluate);
    if (sc_compare->parsed()) return run_compare(compare);
    std::cerr << app.help();
    return 2;
  } catch (const usage_error& e) {
    std::cerr << "vptlab: " << e.what() << "\n";
    return 2;
  } catch (const shape_error& e) {
    std::cerr << "vptlab: " << e.what() << "\n";
    return 3;
  } catch (const data_error& e) {
    std::cerr << "vptlab: " << e.what() << "\n";
    return 3;
  } catch (const numeric_error& e) {
    std::cerr << "vptlab: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "vptlab: " << e.what() << "\n";
    return 4;
  }
}

}  // namespace vptlab
