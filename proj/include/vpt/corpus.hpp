#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "vpt/errors.hpp"

namespace vptlab {

// One source/summary pair with multiple reference summaries. Both sides are
// stored pre-tokenized (whitespace tokens).
struct Example {
  std::string id;
  std::vector<std::string> code;
  std::vector<std::vector<std::string>> refs;
};

struct CorpusSplits {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

struct GrammarParams {
  int n_refs = 3;
  double train_frac = 0.70;
  double valid_frac = 0.15;
};

// Deterministic synthetic corpus: arity-2 pseudo-functions paired with
// paraphrase summaries drawn from a bank of phrasing registers. Splits are
// disjoint by construction (every code string is unique corpus-wide).
CorpusSplits generate_corpus(uint64_t seed, int n_examples,
                             const GrammarParams& params = {});

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSep = 4;

  Vocabulary();

  // Builds from training text only; non-special tokens get ids in sorted
  // order so rebuilds from identical input are stable.
  static Vocabulary build(const std::vector<Example>& train);

  // Rebuilds from a previously saved id -> token list; the first entries
  // must be the special tokens in id order.
  static Vocabulary from_tokens(const std::vector<std::string>& id_to_token);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int id(const std::string& token) const;  // kUnk for unseen tokens
  const std::string& token(int id) const;

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

std::vector<std::string> tokenize(const std::string& text);
std::string detokenize(const std::vector<std::string>& tokens);

void save_jsonl(const std::string& path, const std::vector<Example>& examples);

struct LoadResult {
  std::vector<Example> examples;
  std::vector<std::string> errors;  // one entry per rejected line
};

// Strict mode throws data_error naming the first bad line; lenient mode
// collects per-line errors and keeps the loadable remainder.
LoadResult load_jsonl(const std::string& path, bool lenient = false);

}  // namespace vptlab
