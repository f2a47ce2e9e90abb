#include "dhicm/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace dhicm {

double Hypothesis::score(double alpha) const {
  const double len = static_cast<double>(tokens.size());
  return log_prob / std::pow(len, alpha);
}

namespace {

std::vector<double> log_probs_from_logits(const std::vector<real>& logits) {
  double mx = logits[0];
  for (real v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (real v : logits) sum += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> lp(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) lp[i] = static_cast<double>(logits[i]) - lse;
  return lp;
}

}  // namespace

std::vector<int> greedy_decode(const Model& model, const std::vector<int>& src, int max_len,
                               const PruneSpec* prune) {
  EncodedSource enc = model.encode(frame(src), prune);
  std::vector<int> prefix = {Vocab::bos_id};
  std::vector<int> out;
  for (int step = 0; step < max_len; ++step) {
    const std::vector<real> logits = model.next_token_logits(enc, prefix, prune);
    int best = -1;
    for (int v = 0; v < static_cast<int>(logits.size()); ++v) {
      if (v == Vocab::pad_id || v == Vocab::bos_id) continue;
      if (best < 0 || logits[static_cast<std::size_t>(v)] > logits[static_cast<std::size_t>(best)]) {
        best = v;
      }
    }
    if (best == Vocab::eos_id) break;
    out.push_back(best);
    prefix.push_back(best);
    if (static_cast<int>(prefix.size()) >= model.config().max_len) break;
  }
  return out;
}

Hypothesis beam_search(const Model& model, const std::vector<int>& src, int beam_size, int max_len,
                       double length_penalty, const PruneSpec* prune) {
  if (beam_size < 1) throw std::invalid_argument("beam_search: beam_size must be >= 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");
  max_len = std::min(max_len, model.config().max_len - 1);  // prefix holds bos + tokens

  EncodedSource enc = model.encode(frame(src), prune);

  struct Live {
    std::vector<int> tokens;
    double log_prob = 0.0;
  };
  std::vector<Live> live = {Live{}};
  std::vector<Hypothesis> finished;

  struct Candidate {
    double log_prob;
    int token;
    int beam_index;
  };

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<Candidate> candidates;
    candidates.reserve(live.size() * 8);
    for (std::size_t bi = 0; bi < live.size(); ++bi) {
      std::vector<int> prefix;
      prefix.reserve(live[bi].tokens.size() + 1);
      prefix.push_back(Vocab::bos_id);
      prefix.insert(prefix.end(), live[bi].tokens.begin(), live[bi].tokens.end());
      const std::vector<real> logits = model.next_token_logits(enc, prefix, prune);
      const std::vector<double> lp = log_probs_from_logits(logits);
      for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
        if (v == Vocab::pad_id || v == Vocab::bos_id) continue;
        candidates.push_back(
            Candidate{live[bi].log_prob + lp[static_cast<std::size_t>(v)], v, static_cast<int>(bi)});
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.token != b.token) return a.token < b.token;
      return a.beam_index < b.beam_index;
    });

    // Consume the top beam_size candidates: eos retires a hypothesis, any
    // other token keeps it live. With beam_size 1 this is exactly greedy.
    std::vector<Live> next;
    const int budget = std::min<int>(beam_size, static_cast<int>(candidates.size()));
    for (int ci = 0; ci < budget; ++ci) {
      const Candidate& c = candidates[static_cast<std::size_t>(ci)];
      if (c.token == Vocab::eos_id) {
        Hypothesis h;
        h.tokens = live[static_cast<std::size_t>(c.beam_index)].tokens;
        h.tokens.push_back(Vocab::eos_id);
        h.log_prob = c.log_prob;
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        Live l;
        l.tokens = live[static_cast<std::size_t>(c.beam_index)].tokens;
        l.tokens.push_back(c.token);
        l.log_prob = c.log_prob;
        next.push_back(std::move(l));
      }
    }
    live = std::move(next);
  }

  for (const Live& l : live) {
    Hypothesis h;
    h.tokens = l.tokens;
    h.tokens.push_back(Vocab::eos_id);  // terminator carries no log-prob
    h.log_prob = l.log_prob;
    h.finished = true;
    h.truncated = true;
    finished.push_back(std::move(h));
  }
  if (finished.empty()) throw std::runtime_error("beam_search: no hypothesis produced");

  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    const double si = finished[i].score(length_penalty);
    const double sb = finished[best].score(length_penalty);
    if (si > sb || (si == sb && finished[i].tokens < finished[best].tokens)) best = i;
  }
  return finished[best];
}

double corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references, int max_n) {
  if (hypotheses.empty()) throw std::invalid_argument("bleu: empty hypothesis set");
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                                std::to_string(references.size()) + " references");
  }
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");

  std::vector<long long> correct(static_cast<std::size_t>(max_n), 0);
  std::vector<long long> total(static_cast<std::size_t>(max_n), 0);
  long long hyp_len = 0, ref_len = 0;

  using Ngram = std::vector<int>;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    hyp_len += static_cast<long long>(hyp.size());
    ref_len += static_cast<long long>(ref.size());
    for (int n = 1; n <= max_n; ++n) {
      const int hn = static_cast<int>(hyp.size()) - n + 1;
      const int rn = static_cast<int>(ref.size()) - n + 1;
      if (hn <= 0) continue;
      total[static_cast<std::size_t>(n - 1)] += hn;
      std::map<Ngram, long long> ref_counts;
      for (int i = 0; i < rn; ++i) {
        ref_counts[Ngram(ref.begin() + i, ref.begin() + i + n)] += 1;
      }
      std::map<Ngram, long long> hyp_counts;
      for (int i = 0; i < hn; ++i) {
        hyp_counts[Ngram(hyp.begin() + i, hyp.begin() + i + n)] += 1;
      }
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) {
          correct[static_cast<std::size_t>(n - 1)] += std::min(count, it->second);
        }
      }
    }
  }

  if (hyp_len == 0) return 0.0;
  double log_precision = 0.0;
  int orders = 0;
  for (int n = 0; n < max_n; ++n) {
    if (total[static_cast<std::size_t>(n)] == 0) continue;  // no n-grams of this order exist
    if (correct[static_cast<std::size_t>(n)] == 0) return 0.0;
    log_precision += std::log(static_cast<double>(correct[static_cast<std::size_t>(n)]) /
                              static_cast<double>(total[static_cast<std::size_t>(n)]));
    ++orders;
  }
  if (orders == 0) return 0.0;
  const double bp =
      hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_precision / static_cast<double>(orders));
}

}  // namespace dhicm
