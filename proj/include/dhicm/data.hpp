#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dhicm {

// Token <-> id bijection with fixed reserved ids.
struct Vocab {
  static constexpr int pad_id = 0;
  static constexpr int bos_id = 1;
  static constexpr int eos_id = 2;
  static constexpr int unk_id = 3;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  static Vocab from_tokens(const std::vector<std::string>& tokens);

  int size() const { return static_cast<int>(id_to_token.size()); }
  int lookup(const std::string& token) const;  // unk_id when missing
  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);
};

using SentencePair = std::pair<std::vector<int>, std::vector<int>>;

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  std::string split;  // train / valid / test

  std::size_t size() const { return pairs.size(); }
  // Leading subset view (the generator produces nested training sets).
  ParallelCorpus prefix(std::size_t n) const;
};

struct TaskSpec {
  enum class Kind { Copy, Reverse, Lexicon };
  Kind kind = Kind::Copy;
  int vocab_size = 32;  // source word types (lexicon adds as many target types)
  int min_len = 3;
  int max_len = 10;
  int train_size = 2000;
  int valid_size = 200;
  int test_size = 200;
  std::uint64_t seed = 1;

  void validate() const;
  static Kind parse_kind(const std::string& name);
  static std::string kind_name(Kind k);
};

struct GeneratedTask {
  Vocab vocab;
  ParallelCorpus train, valid, test;
};

// Deterministic synthetic parallel data. Splits are disjoint by construction:
// distinct derived RNG streams plus cross-split dedup on (src, tgt) pairs.
//   copy:    target == source
//   reverse: target == reversed source
//   lexicon: target = bijective token map of source, then adjacent pairs
//            swapped (positions 0<->1, 2<->3, ...); odd tail stays in place.
GeneratedTask gen_task(const TaskSpec& spec);

struct Batch {
  int size = 0;        // sentences
  int src_len = 0;     // padded framed source length
  int tgt_len = 0;     // padded decoder length (framed target minus one)
  std::vector<int> src;               // [size * src_len]
  std::vector<int> tgt_in;            // [size * tgt_len], starts with bos
  std::vector<int> tgt_out;           // [size * tgt_len], ends with eos
  std::vector<std::uint8_t> src_pad;  // 1 = real token
  std::vector<std::uint8_t> tgt_pad;  // 1 = real position (same for in/out)

  std::size_t target_tokens() const;  // unmasked tgt positions
};

// Frames every pair with bos/eos, sorts by padded length, and packs greedily
// so that (sentences in batch) * (max framed length in batch) <= max_tokens.
// Every non-pad token of the corpus lands in exactly one batch.
std::vector<Batch> batchify(const ParallelCorpus& corpus, int max_tokens);

// Plain-text parallel files: one sentence per line, space-separated tokens,
// written as <prefix>.src / <prefix>.tgt.
void save_corpus(const ParallelCorpus& corpus, const Vocab& vocab, const std::string& prefix);
ParallelCorpus load_corpus(const std::string& prefix, const Vocab& vocab, const std::string& split);

// Vocabulary collected from the token set of parallel files (sorted order).
Vocab build_vocab_from_files(const std::vector<std::string>& paths);

std::vector<int> frame(const std::vector<int>& ids);  // bos + ids + eos

}  // namespace dhicm
