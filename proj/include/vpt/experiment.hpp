#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vpt/backbone.hpp"
#include "vpt/corpus.hpp"
#include "vpt/decode.hpp"
#include "vpt/metrics.hpp"
#include "vpt/select.hpp"
#include "vpt/vpt_model.hpp"

namespace vptlab {

inline constexpr const char* kToolVersion = "vptlab 0.1.0";

// Every module config plus run-level settings, loadable from a flat
// key=value file with section-prefixed keys (backbone.*, vpt.*, decode.*,
// select.*, phase1.*, phase2.*, run.*). Every key has a default; unknown
// keys are rejected so typos fail loudly.
struct ExperimentConfig {
  BackboneConfig backbone;  // vocab_size is derived from the corpus
  VPTConfig vpt;
  DecodeConfig decode;
  SelectionConfig select;
  TrainConfig phase1;
  VptTrainConfig phase2;
  uint64_t seed = 11;
};

ExperimentConfig load_experiment_config(const std::string& path);
void apply_config_override(ExperimentConfig& cfg, const std::string& key,
                           const std::string& value);
// Full snapshot, every known key present; feeds manifests and checkpoints.
std::map<std::string, std::string> serialize_config(const ExperimentConfig& cfg);
const std::vector<std::string>& known_config_keys();

// Writes through a sibling temp file and rename, so readers never observe a
// partial file.
void atomic_write_text(const std::string& path, const std::string& content);

struct RunManifest {
  std::string subcommand;
  uint64_t seed = 0;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> input_hashes;   // path -> fnv1a hex
  std::map<std::string, std::string> output_hashes;  // path -> fnv1a hex
  double wall_clock_sec = 0;
  std::map<std::string, double> stage_metrics;
};

// Sorted-key JSON, written atomically at run end.
void write_manifest(const std::string& path, const RunManifest& m);

// One decoded candidate in the JSONL interchange format.
struct TextCandidate {
  std::string tokens;  // space-joined summary tokens
  std::vector<double> logprobs;
  double score = 0;  // length-normalized log-prob
};

// One line of a candidate file: every candidate decoded for one input,
// optionally annotated with the selected subset.
struct CandidateEntry {
  std::string id;
  std::string strategy;
  std::vector<TextCandidate> candidates;
  std::vector<int> selected;
  bool has_selected = false;
};

TextCandidate to_text_candidate(const Candidate& c, const Vocabulary& vocab);
void save_candidates(const std::string& path,
                     const std::vector<CandidateEntry>& entries);
std::vector<CandidateEntry> load_candidates(const std::string& path);

struct GenerateOptions {
  std::string strategy = "vpt";  // greedy|sample|beam|sbs|dbs|vpt
  int n = 100;                   // sample draws / prior latents
  int beam = 4;                  // beam width (per latent under vpt)
  float tau = 1.0f;              // prior sigma scale at decode time
  float temperature = 1.0f;      // sampling / stochastic beam temperature
  uint64_t seed = 0;
  int threads = 1;
};

// Decodes every example of the split under one strategy. Per-example RNG
// streams derive from the seed and the example index alone, so the output
// is byte-identical for any thread count; entries come back in input order.
// vpt_model may be null for the backbone-only strategies.
std::vector<CandidateEntry> generate_candidates(
    const Backbone& model, const VPTModel* vpt_model, const Vocabulary& vocab,
    const std::vector<Example>& split, const DecodeConfig& base_decode,
    const GenerateOptions& opts);

struct PerExampleMetrics {
  std::string id;
  double oracle_bleu4 = 0;
  double oracle_rouge_l = 0;
  double oracle_meteor = 0;
  int n_candidates = 0;
};

// Oracle metrics are means over examples of the best candidate per metric;
// diversity metrics average over the examples where they are defined.
struct MetricReport {
  std::string strategy;
  bool used_selected = false;
  int n_examples = 0;
  double mean_candidates = 0;
  double oracle_bleu4 = 0;
  double oracle_rouge_l = 0;
  double oracle_meteor = 0;
  std::optional<double> distinct1;
  std::optional<double> distinct2;
  std::optional<double> self_bleu;
  std::vector<PerExampleMetrics> per_example;
};

MetricReport evaluate_candidates(const std::vector<CandidateEntry>& entries,
                                 const std::vector<Example>& corpus_split);
void write_metric_report(const std::string& path, const MetricReport& r);
MetricReport load_metric_report(const std::string& path);
std::string format_metric_table(const MetricReport& r);

struct CompareResult {
  std::string metric;
  int n_pairs = 0;
  WilcoxonResult wilcoxon;  // one-sided, A greater than B
  double mean_a = 0;
  double mean_b = 0;
  double mean_delta = 0;
};

// Pairs the two reports' per-example values by id and tests A > B.
CompareResult compare_reports(const MetricReport& a, const MetricReport& b,
                              const std::string& metric);
void write_compare_result(const std::string& path, const CompareResult& r);

// Entry point shared by the binary and the tests. Returns the process exit
// code: 0 success, 2 usage error, 3 data error, 4 numeric failure.
int vptlab_main(const std::vector<std::string>& args);

}  // namespace vptlab
