#include "moestack/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <regex>
#include <set>

#include <json.hpp>

#include "moestack/io.hpp"

namespace moestack {

const std::vector<std::string>& curriculum_domains() {
  static const std::vector<std::string> kOrder = {"format", "procedural",
                                                  "arithmetic", "lookup"};
  return kOrder;
}

namespace {

std::string random_word(Rng& rng, int lo, int hi) {
  for (;;) {
    const int len =
        lo + static_cast<int>(rng.below(static_cast<uint64_t>(hi - lo + 1)));
    std::string w;
    for (int i = 0; i < len; ++i)
      w.push_back(static_cast<char>('a' + rng.below(26)));
    // "mg" is a lookup-domain keyword; keep it out of random words so the
    // contamination sweep never misfires on honest samples
    if (w.find("mg") == std::string::npos) return w;
  }
}

// carry/borrow trace shared by arithmetic and the lookup dosage sub-task:
// two-digit operands decompose into a tens line, a ones line, then the
// result, e.g. "40+30=70;7+6=13;=83"
std::string trace_two_digit(int a, int b, char op) {
  const int ta = (a / 10) * 10, ob = a % 10;
  const int tb = (b / 10) * 10, oc = b % 10;
  const int tens = (op == '+') ? ta + tb : ta - tb;
  const int ones = (op == '+') ? ob + oc : ob - oc;
  const int total = (op == '+') ? a + b : a - b;
  return std::to_string(ta) + op + std::to_string(tb) + "=" +
         std::to_string(tens) + ";" + std::to_string(ob) + op +
         std::to_string(oc) + "=" + std::to_string(ones) + ";=" +
         std::to_string(total);
}

// fixed key -> class association that training has to memorize; the table
// is built once from its own constant seed so every run and every caller
// agrees on the facts
const std::vector<std::pair<std::string, std::string>>& fact_table() {
  static const std::vector<std::pair<std::string, std::string>> kTable = [] {
    std::vector<std::pair<std::string, std::string>> t = {
        {"aspirin", "painkiller"},   {"amoxil", "antibiotic"},
        {"zyrtec", "antihistamine"}, {"lipitor", "statin"},
        {"advil", "painkiller"},     {"keflex", "antibiotic"},
        {"claritin", "antihistamine"}, {"crestor", "statin"},
        {"tylenol", "painkiller"},   {"cipro", "antibiotic"},
        {"allegra", "antihistamine"}, {"zocor", "statin"},
    };
    static constexpr std::array<const char*, 4> kClasses = {
        "painkiller", "antibiotic", "antihistamine", "statin"};
    Rng rng(0xFAC7AB1EULL);
    std::set<std::string> used;
    for (const auto& [k, v] : t) used.insert(k);
    while (t.size() < 64) {
      std::string name = random_word(rng, 5, 7);
      if (!used.insert(name).second) continue;
      t.emplace_back(std::move(name), kClasses[t.size() % 4]);
    }
    return t;
  }();
  return kTable;
}

Sample make_sample(const std::string& domain, std::string prompt,
                   std::string answer) {
  Sample s;
  s.prompt = std::move(prompt);
  s.answer = std::move(answer);
  s.domain = domain;
  const std::string key = domain + ":" + s.prompt;
  s.id = fnv1a(key.data(), key.size());
  return s;
}

Sample gen_format(Rng& rng) {
  const std::string w = random_word(rng, 3, 6);
  switch (rng.below(3)) {
    case 0:
      return make_sample("format", "say " + w, w + "!");
    case 1: {
      std::string up = w;
      std::transform(up.begin(), up.end(), up.begin(),
                     [](unsigned char c) { return std::toupper(c); });
      return make_sample("format", "upper " + w, up);
    }
    default:
      return make_sample("format", "echo " + w, w + " " + w);
  }
}

Sample gen_procedural(Rng& rng) {
  const std::string w = random_word(rng, 3, 5);
  switch (rng.below(3)) {
    case 0:
      return make_sample("procedural", "rev(" + w + ")",
                         std::string(w.rbegin(), w.rend()));
    case 1: {
      std::string d;
      for (char c : w) {
        d.push_back(c);
        d.push_back(c);
      }
      return make_sample("procedural", "dup(" + w + ")", d);
    }
    default: {
      std::string b;
      for (char c : w) {
        b.push_back('[');
        b.push_back(c);
        b.push_back(']');
      }
      return make_sample("procedural", "wrap[" + w + "]", b);
    }
  }
}

Sample gen_arithmetic(Rng& rng) {
  const uint64_t kind = rng.below(4);
  if (kind == 0) {
    // single digit, direct
    const int a = 1 + static_cast<int>(rng.below(9));
    const int b = 1 + static_cast<int>(rng.below(9));
    return make_sample("arithmetic",
                       std::to_string(a) + "+" + std::to_string(b) + "=?",
                       "=" + std::to_string(a + b));
  }
  if (kind == 3) {
    // three digit, direct
    const int a = 100 + static_cast<int>(rng.below(900));
    const int b = 100 + static_cast<int>(rng.below(900));
    const bool sub = rng.below(2) == 0 && a >= b;
    const char op = sub ? '-' : '+';
    const int r = sub ? a - b : a + b;
    return make_sample("arithmetic",
                       std::to_string(a) + op + std::to_string(b) + "=?",
                       "=" + std::to_string(r));
  }
  // two digit with trace
  int a = 10 + static_cast<int>(rng.below(90));
  int b = 10 + static_cast<int>(rng.below(90));
  const bool sub = (kind == 2);
  if (sub && b > a) std::swap(a, b);
  const char op = sub ? '-' : '+';
  return make_sample("arithmetic",
                     std::to_string(a) + op + std::to_string(b) + "=?",
                     trace_two_digit(a, b, op));
}

Sample gen_lookup(Rng& rng) {
  if (rng.below(10) < 3) {
    // dosage sub-task: addition dressed as a dose question; the answer
    // reuses the arithmetic trace format on purpose so the arithmetic
    // stack can help with it
    const int a = 10 + static_cast<int>(rng.below(90));
    const int b = 10 + static_cast<int>(rng.below(90));
    return make_sample("lookup",
                       "dose " + std::to_string(a) + "mg+" +
                           std::to_string(b) + "mg=?",
                       trace_two_digit(a, b, '+') + "mg");
  }
  const auto& table = fact_table();
  const auto& [key, value] = table[rng.below(table.size())];
  if (rng.below(2) == 0)
    return make_sample("lookup", "what is " + key + "?", value);
  return make_sample("lookup", "class of " + key + "?", value);
}

}  // namespace

std::vector<Sample> generate(const std::string& domain, int n, uint64_t seed) {
  Sample (*gen)(Rng&) = nullptr;
  if (domain == "format")
    gen = gen_format;
  else if (domain == "procedural")
    gen = gen_procedural;
  else if (domain == "arithmetic")
    gen = gen_arithmetic;
  else if (domain == "lookup")
    gen = gen_lookup;
  else
    throw ArgumentError("unknown domain '" + domain + "'");

  Rng rng(seed ^ fnv1a(domain.data(), domain.size()));
  std::vector<Sample> out;
  std::set<std::string> seen;
  int attempts = 0;
  const int max_attempts = n * 200;
  while (static_cast<int>(out.size()) < n && attempts < max_attempts) {
    ++attempts;
    Sample s = gen(rng);
    if (!seen.insert(s.prompt).second) continue;  // unique prompts only
    out.push_back(std::move(s));
  }
  if (static_cast<int>(out.size()) < n) {
    throw DataError("domain '" + domain + "' exhausted after " +
                    std::to_string(attempts) + " draws, got " +
                    std::to_string(out.size()) + " of " + std::to_string(n));
  }
  return out;
}

DatasetSplit split_dataset(std::vector<Sample> samples, double val_fraction,
                           uint64_t seed) {
  if (val_fraction <= 0.0 || val_fraction >= 1.0) {
    throw ArgumentError("val_fraction must be in (0,1)");
  }
  Rng rng(seed);
  for (size_t i = samples.size(); i > 1; --i) {
    const size_t j = rng.below(i);
    std::swap(samples[i - 1], samples[j]);
  }
  const size_t n_val = std::max<size_t>(
      1, static_cast<size_t>(double(samples.size()) * val_fraction));
  DatasetSplit split;
  split.val.assign(samples.begin(), samples.begin() + static_cast<int64_t>(n_val));
  split.train.assign(samples.begin() + static_cast<int64_t>(n_val),
                     samples.end());
  return split;
}

// ---- decontamination ----

namespace {
const std::vector<std::pair<std::string, std::vector<std::string>>>&
keyword_tables() {
  static const std::vector<std::pair<std::string, std::vector<std::string>>>
      kTables = {
          {"format", {"say ", "upper ", "echo "}},
          {"procedural", {"rev(", "dup(", "wrap["}},
          {"arithmetic", {"+", "-", "=?"}},
          {"lookup", {"what is ", "dose ", "mg"}},
      };
  return kTables;
}

int count_occurrences(const std::string& text, const std::string& needle) {
  int n = 0;
  size_t pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    ++n;
    pos += needle.size();
  }
  return n;
}
}  // namespace

int keyword_score(const std::string& text, const std::string& domain) {
  for (const auto& [name, words] : keyword_tables()) {
    if (name != domain) continue;
    int score = 0;
    for (const auto& w : words) score += count_occurrences(text, w);
    return score;
  }
  throw ArgumentError("unknown domain '" + domain + "'");
}

DecontaminationResult decontaminate(const std::vector<Sample>& samples,
                                    const std::string& domain) {
  (void)keyword_score("", domain);  // validates the domain name
  DecontaminationResult res;
  for (const auto& s : samples) {
    const std::string text = s.prompt + "\t" + s.answer;
    const int own = keyword_score(text, domain);
    std::string best_domain = domain;
    int best = own;
    for (const auto& [name, words] : keyword_tables()) {
      (void)words;
      if (name == domain) continue;
      const int sc = keyword_score(text, name);
      if (sc > best) {  // strictly higher forces reassignment
        best = sc;
        best_domain = name;
      }
    }
    if (best_domain == domain) {
      res.kept.push_back(s);
    } else {
      Sample moved = s;
      moved.domain = best_domain;
      res.reassigned.push_back(std::move(moved));
    }
  }
  return res;
}

std::string strip_chat_tokens(const std::string& text) {
  static const std::regex kPattern(
      R"((<start_of_turn>|<end_of_turn>|<\|im_start\|>|<\|im_end\|>|\[INST\]|\[/INST\]))");
  std::string s = text;
  for (;;) {  // repeat to a fixpoint: removal may expose a nested token
    std::string next = std::regex_replace(s, kPattern, "");
    if (next == s) return s;
    s = std::move(next);
  }
}

// ---- tokenization ----

std::vector<int> encode_bytes(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) {
    if (c >= 128) {
      throw DataError("non-ascii byte " + std::to_string(int(c)) +
                      " in text; byte-level vocab is 128");
    }
    ids.push_back(static_cast<int>(c));
  }
  return ids;
}

std::string decode_bytes(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= 128) {
      throw DataError("token id " + std::to_string(id) + " not a byte");
    }
    out.push_back(static_cast<char>(id));
  }
  return out;
}

EncodedSample encode_sample(const Sample& s, int max_seq_len) {
  std::string seq = s.prompt + "\t" + s.answer + "\n";
  if (static_cast<int>(seq.size()) > max_seq_len) {
    seq.resize(static_cast<size_t>(max_seq_len));
  }
  const std::vector<int> ids = encode_bytes(seq);
  const size_t n = ids.size();
  if (n < 2) throw DataError("sample too short to score: '" + seq + "'");
  EncodedSample e;
  e.input_ids.assign(ids.begin(), ids.end() - 1);
  e.target_ids.resize(n - 1);
  const size_t prompt_len = std::min(s.prompt.size(), n - 1);
  for (size_t i = 0; i + 1 < n; ++i) {
    if (i >= prompt_len) {
      e.target_ids[i] = ids[i + 1];
      ++e.scored;
    } else {
      e.target_ids[i] = -1;
    }
  }
  if (e.scored == 0) throw DataError("sample has no scored positions");
  return e;
}

std::vector<int> corpus_stream(const std::vector<Sample>& samples) {
  std::vector<int> stream;
  for (const auto& s : samples) {
    const auto ids = encode_bytes(s.prompt + "\t" + s.answer + "\n");
    stream.insert(stream.end(), ids.begin(), ids.end());
  }
  return stream;
}

void dump_jsonl(const std::vector<Sample>& samples, const std::string& path) {
  std::string out;
  for (const auto& s : samples) {
    nlohmann::json j = {{"id", s.id},
                        {"domain", s.domain},
                        {"prompt", s.prompt},
                        {"answer", s.answer}};
    out += j.dump();
    out += "\n";
  }
  io::write_text_atomic(path, out);
}

std::vector<Sample> load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot open dataset: " + path);
  std::vector<Sample> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    Sample s;
    s.id = j.at("id").get<uint64_t>();
    s.domain = j.at("domain").get<std::string>();
    s.prompt = strip_chat_tokens(j.at("prompt").get<std::string>());
    s.answer = strip_chat_tokens(j.at("answer").get<std::string>());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace moestack
