#include "vpt/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "vpt/rng.hpp"

namespace vptlab {
namespace {

using json = nlohmann::json;

// Phrasing registers: each summary commits to one register for its opener,
// its verb phrase, and its closer. Three registers are common, the rest form
// a long tail, so a narrow searcher that chases per-sequence probability
// keeps re-deriving variants of the common phrasings while a sampler that
// explores latent space reaches the tail.
struct Register {
  const char* head;  // 4 tokens
  const char* mid;   // 4 tokens
  const char* tail;  // 5 tokens
};

constexpr Register kRegisters[] = {
    {"this small routine simply", "computes every requested value",
     "handing results back without fuss"},
    {"here one compact helper", "derives that combined outcome",
     "while keeping callers fully informed"},
    {"given two plain inputs", "it evaluates their pairing",
     "before reporting a single answer"},
    {"behold an arcane contraption", "conjuring forth twin offerings",
     "beneath skies granting swift verdicts"},
    {"observe yon curious gadget", "weaving together paired figures",
     "until destiny reveals its decree"},
    {"dear reader kindly note", "how arithmetic gently blends",
     "dual treasures into tidy bundles"},
    {"warning dense logic ahead", "crunching raw numeric fodder",
     "yielding exactly what was ordered"},
    {"legend speaks about machinery", "folding separate pieces whole",
     "once more delivering promised riches"},
    {"strictly speaking we merely", "apply standard textbook rules",
     "obtaining precisely reproducible final output"},
    {"friends gather around quickly", "witness humble math performing",
     "as engineers applaud politely offstage"},
    {"formally stated each invocation", "maps sorted argument couples",
     "onto deterministic replies per contract"},
    {"rumor has long claimed", "these operations never falter",
     "though skeptics keep watching closely"},
    {"mark well diligent maintainer", "said procedure faithfully processes",
     "whatever arguments arrive at runtime"},
    {"in essence nothing fancy", "just honest little calculations",
     "wrapped inside friendly reusable shells"},
};

constexpr int kNumRegisters = 14;
constexpr int kNumCommon = 3;
constexpr double kCommonWeight = 0.22;

// Binary phrasing choices threaded between the register blocks. The
// preferred word wins 85% of the time: likely enough that flipping one is
// the cheapest deviation a cumulative-score search can make, unlikely
// enough that references still vary.
constexpr const char* kMicroA[] = {"really", "now", "also", "quite", "overall"};
constexpr const char* kMicroB[] = {"truly", "then", "still", "fairly", "broadly"};
constexpr int kNumMicro = 5;
constexpr double kMicroPrefer = 0.85;

constexpr const char* kOps[] = {"add", "sub", "mul", "div", "min", "max"};
constexpr const char* kOpWords[] = {"sum",     "difference", "product",
                                    "quotient", "minimum",    "maximum"};
constexpr int kNumOps = 6;
constexpr int kNumFnames = 24;
constexpr int kNumArgsA = 16;
constexpr int kNumArgsB = 16;

double register_weight(int r) {
  if (r < kNumCommon) return kCommonWeight;
  return (1.0 - kNumCommon * kCommonWeight) / (kNumRegisters - kNumCommon);
}

int draw_register(Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  for (int r = 0; r < kNumRegisters; ++r) {
    acc += register_weight(r);
    if (u <= acc) return r;
  }
  return kNumRegisters - 1;
}

void append_phrase(std::vector<std::string>& out, const char* phrase) {
  std::istringstream in(phrase);
  std::string w;
  while (in >> w) out.push_back(w);
}

std::vector<std::string> make_summary(int reg, const std::vector<int>& micro,
                                      int op, const std::string& a,
                                      const std::string& b) {
  std::vector<std::string> y;
  y.reserve(24);
  append_phrase(y, kRegisters[reg].head);
  y.push_back(micro[0] ? kMicroB[0] : kMicroA[0]);
  y.push_back("the");
  y.push_back(kOpWords[op]);
  y.push_back("of");
  y.push_back(a);
  y.push_back(micro[1] ? kMicroB[1] : kMicroA[1]);
  append_phrase(y, kRegisters[reg].mid);
  y.push_back(micro[2] ? kMicroB[2] : kMicroA[2]);
  y.push_back("and");
  y.push_back(b);
  y.push_back(micro[3] ? kMicroB[3] : kMicroA[3]);
  append_phrase(y, kRegisters[reg].tail);
  y.push_back(micro[4] ? kMicroB[4] : kMicroA[4]);
  return y;
}

std::vector<int> draw_micro(Rng& rng) {
  std::vector<int> m(kNumMicro);
  for (int i = 0; i < kNumMicro; ++i) m[i] = rng.uniform() >= kMicroPrefer;
  return m;
}

}  // namespace

CorpusSplits generate_corpus(uint64_t seed, int n_examples,
                             const GrammarParams& params) {
  if (n_examples < 10) {
    throw usage_error("generate_corpus: n_examples must be at least 10");
  }
  if (params.n_refs < 3 || params.n_refs > 5) {
    throw usage_error("generate_corpus: n_refs must be in [3, 5]");
  }
  if (params.train_frac <= 0 || params.valid_frac <= 0 ||
      params.train_frac + params.valid_frac >= 1.0) {
    throw usage_error("generate_corpus: split fractions must be positive and "
                      "leave room for a test split");
  }

  Rng rng(seed);
  std::vector<Example> all;
  all.reserve(n_examples);
  std::set<std::tuple<int, int, int, int>> used_sources;

  for (int i = 0; i < n_examples; ++i) {
    int fn, op, ia, ib;
    do {
      fn = rng.randint(kNumFnames);
      op = rng.randint(kNumOps);
      ia = rng.randint(kNumArgsA);
      ib = rng.randint(kNumArgsB);
    } while (!used_sources.insert({fn, op, ia, ib}).second);

    std::string a = "a" + std::to_string(ia);
    std::string b = "b" + std::to_string(ib);

    Example ex;
    {
      char idbuf[16];
      std::snprintf(idbuf, sizeof(idbuf), "ex%05d", i);
      ex.id = idbuf;
    }
    ex.code = {"def", "fn" + std::to_string(fn), "(", a, ",", b, ")",
               ":",   "return", a, kOps[op], b};

    while (static_cast<int>(ex.refs.size()) < params.n_refs) {
      auto y = make_summary(draw_register(rng), draw_micro(rng), op, a, b);
      if (std::find(ex.refs.begin(), ex.refs.end(), y) == ex.refs.end()) {
        ex.refs.push_back(std::move(y));
      }
    }
    all.push_back(std::move(ex));
  }

  int n_train = static_cast<int>(n_examples * params.train_frac);
  int n_valid = static_cast<int>(n_examples * params.valid_frac);
  n_train = std::max(1, std::min(n_train, n_examples - 2));
  n_valid = std::max(1, std::min(n_valid, n_examples - n_train - 1));

  CorpusSplits splits;
  splits.train.assign(all.begin(), all.begin() + n_train);
  splits.valid.assign(all.begin() + n_train, all.begin() + n_train + n_valid);
  splits.test.assign(all.begin() + n_train + n_valid, all.end());
  return splits;
}

Vocabulary::Vocabulary() {
  id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>", "<sep>"};
  for (int i = 0; i < static_cast<int>(id_to_token_.size()); ++i) {
    token_to_id_[id_to_token_[i]] = i;
  }
}

Vocabulary Vocabulary::build(const std::vector<Example>& train) {
  std::set<std::string> tokens;
  for (const auto& ex : train) {
    tokens.insert(ex.code.begin(), ex.code.end());
    for (const auto& ref : ex.refs) tokens.insert(ref.begin(), ref.end());
  }
  Vocabulary v;
  for (const auto& t : tokens) {
    if (v.token_to_id_.count(t)) continue;
    v.token_to_id_[t] = static_cast<int>(v.id_to_token_.size());
    v.id_to_token_.push_back(t);
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& id_to_token) {
  Vocabulary v;
  if (id_to_token.size() < v.id_to_token_.size()) {
    throw data_error("Vocabulary::from_tokens: token list shorter than the specials");
  }
  for (size_t i = 0; i < v.id_to_token_.size(); ++i) {
    if (id_to_token[i] != v.id_to_token_[i]) {
      throw data_error("Vocabulary::from_tokens: special token mismatch at id " +
                       std::to_string(i));
    }
  }
  for (size_t i = v.id_to_token_.size(); i < id_to_token.size(); ++i) {
    const std::string& t = id_to_token[i];
    if (t.empty() || v.token_to_id_.count(t)) {
      throw data_error("Vocabulary::from_tokens: empty or duplicate token at id " +
                       std::to_string(i));
    }
    v.token_to_id_[t] = static_cast<int>(v.id_to_token_.size());
    v.id_to_token_.push_back(t);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw usage_error("Vocabulary::token: id " + std::to_string(id) +
                      " out of range [0, " + std::to_string(size()) + ")");
  }
  return id_to_token_[id];
}

std::vector<int> Vocabulary::encode(
    const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (int i : ids) tokens.push_back(token(i));
  return tokens;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> tokens;
  std::string t;
  while (in >> t) tokens.push_back(std::move(t));
  return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

void save_jsonl(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("save_jsonl: cannot open " + path);
  for (const auto& ex : examples) {
    json j;
    j["id"] = ex.id;
    j["code"] = detokenize(ex.code);
    json refs = json::array();
    for (const auto& r : ex.refs) refs.push_back(detokenize(r));
    j["refs"] = std::move(refs);
    out << j.dump() << '\n';
  }
  if (!out) throw data_error("save_jsonl: write failed for " + path);
}

LoadResult load_jsonl(const std::string& path, bool lenient) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("load_jsonl: cannot open " + path);

  LoadResult result;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::string err;
    try {
      json j = json::parse(line);
      if (!j.is_object()) throw data_error("not a JSON object");
      if (!j.contains("id") || !j["id"].is_string()) {
        throw data_error("missing string field \"id\"");
      }
      if (!j.contains("code") || !j["code"].is_string()) {
        throw data_error("missing string field \"code\"");
      }
      if (!j.contains("refs") || !j["refs"].is_array() || j["refs"].empty()) {
        throw data_error("missing non-empty array field \"refs\"");
      }
      Example ex;
      ex.id = j["id"].get<std::string>();
      ex.code = tokenize(j["code"].get<std::string>());
      if (ex.code.empty()) throw data_error("empty code");
      for (const auto& r : j["refs"]) {
        if (!r.is_string()) throw data_error("non-string ref");
        auto ref = tokenize(r.get<std::string>());
        if (ref.empty()) throw data_error("empty ref");
        ex.refs.push_back(std::move(ref));
      }
      result.examples.push_back(std::move(ex));
      continue;
    } catch (const json::exception& e) {
      err = e.what();
    } catch (const data_error& e) {
      err = e.what();
    }
    std::string msg = path + ":" + std::to_string(line_no) + ": " + err;
    if (!lenient) throw data_error("load_jsonl: " + msg);
    result.errors.push_back(msg);
  }
  return result;
}

}  // namespace vptlab
