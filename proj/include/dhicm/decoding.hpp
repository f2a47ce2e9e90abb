#pragma once

#include <vector>

#include "dhicm/model.hpp"

namespace dhicm {

struct Hypothesis {
  std::vector<int> tokens;  // generated ids including the closing eos
  double log_prob = 0.0;    // sum of token log-probs (forced eos adds none)
  bool finished = false;
  bool truncated = false;   // eos was forced at max_len

  // Ranking score: log_prob / length^alpha, length counting every token.
  double score(double alpha) const;
};

// Greedy decoding: emit argmax token each step until eos or max_len steps.
// `src` is an unframed id sequence; the returned sequence is unframed too
// (no bos, no trailing eos).
std::vector<int> greedy_decode(const Model& model, const std::vector<int>& src, int max_len,
                               const PruneSpec* prune = nullptr);

// Standard beam search. Candidates exclude pad and bos. At each step the top
// `beam_size` continuations are kept, ordered by cumulative log-prob with
// ties broken by lower token id, then earlier beam index. Hypotheses that
// emit eos retire to the finished pool; after max_len steps the survivors are
// force-finished with eos and flagged truncated. The best finished hypothesis
// under logprob / length^alpha wins. beam_size = 1 reproduces greedy decoding
// token for token.
Hypothesis beam_search(const Model& model, const std::vector<int>& src, int beam_size, int max_len,
                       double length_penalty = 1.0, const PruneSpec* prune = nullptr);

// Corpus-level BLEU in [0, 100]: geometric mean of clipped n-gram precisions
// (n <= max_n) times the brevity penalty. Orders with no n-grams anywhere in
// the hypothesis corpus are excluded from the mean; an order with n-grams but
// zero matches yields 0.
double corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references, int max_n = 4);

}  // namespace dhicm
