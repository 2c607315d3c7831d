#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moestack/common.hpp"

namespace moestack {

struct Sample {
  std::string prompt;
  std::string answer;
  std::string domain;
  uint64_t id = 0;
};

// Curriculum order: formatting scaffold first, then the skill domains.
const std::vector<std::string>& curriculum_domains();

// Deterministic per-domain generators. Domains are separable by prompt
// shape, but the lookup domain's dosage samples deliberately share the
// arithmetic domain's answer format so combination discovery can find
// cross-domain routes.
//
//   format      "say <w>" / "upper <w>" / "echo <w>"   (chat-analog)
//   procedural  "rev(<s>)" / "dup(<s>)" / "wrap[<s>]"  (code-analog)
//   arithmetic  "<a>+<b>=?" with carry/borrow trace    (math-analog)
//   lookup      "what is <key>?" / "class of <key>?" over a fixed table,
//               plus "dose <a>mg+<b>mg=?" sub-tasks    (medical-analog)
std::vector<Sample> generate(const std::string& domain, int n, uint64_t seed);

struct DatasetSplit {
  std::vector<Sample> train;
  std::vector<Sample> val;
};
// Seeded shuffle then split; train and val never share a sample id.
DatasetSplit split_dataset(std::vector<Sample> samples, double val_fraction,
                           uint64_t seed);

// Keyword-score every sample against every domain; a sample scoring
// strictly higher for a foreign domain than for `domain` is moved to the
// reassigned list with its label rewritten.
struct DecontaminationResult {
  std::vector<Sample> kept;
  std::vector<Sample> reassigned;
};
DecontaminationResult decontaminate(const std::vector<Sample>& samples,
                                    const std::string& domain);
int keyword_score(const std::string& text, const std::string& domain);

// Removes chat-template control tokens; idempotent.
std::string strip_chat_tokens(const std::string& text);

// ---- byte tokenization ----
std::vector<int> encode_bytes(const std::string& text);  // each byte < 128
std::string decode_bytes(const std::vector<int>& ids);

// Training sequence: prompt + '\t' + answer + '\n'. Targets are shifted
// by one and masked (-1) for every position whose target is still inside
// the prompt, so only answer bytes (and the terminator) are scored.
struct EncodedSample {
  std::vector<int> input_ids;
  std::vector<int> target_ids;  // -1 where unscored
  int64_t scored = 0;
};
EncodedSample encode_sample(const Sample& s, int max_seq_len);

// Flat token stream of prompt\tanswer\n records, for base pretraining.
std::vector<int> corpus_stream(const std::vector<Sample>& samples);

void dump_jsonl(const std::vector<Sample>& samples, const std::string& path);
std::vector<Sample> load_jsonl(const std::string& path);

}  // namespace moestack
