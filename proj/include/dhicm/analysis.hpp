#pragma once

#include <string>
#include <vector>

#include "dhicm/data.hpp"
#include "dhicm/decoding.hpp"
#include "dhicm/model.hpp"

namespace dhicm {

// A labeled attention matrix, either encoder-decoder weights (rows = target
// tokens, columns = source tokens) or head importance (rows = tokens, columns
// = head indices). Rows sum to 1.
struct AttentionDump {
  std::string kind;  // "enc-dec" | "head-importance"
  std::string site;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<std::vector<double>> matrix;
};

// Encoder-decoder attention of one sentence pair at `layer`. head = -1
// averages over heads. The values are exactly the weights used in the
// forward pass.
AttentionDump dump_encdec_attention(const Model& model, const Vocab& vocab,
                                    const std::vector<int>& src, const std::vector<int>& tgt,
                                    int layer, int head);

// Head-importance distributions at one site for one sentence pair. Rows are
// the site's query positions (source tokens for encoder-self, target-side
// positions otherwise).
AttentionDump dump_head_importance(const Model& model, const Vocab& vocab,
                                   const std::vector<int>& src, const std::vector<int>& tgt,
                                   SiteId site);

// Heads sorted by descending mean importance; ties broken by head index.
std::vector<int> rank_heads(const std::vector<AttentionDump>& dumps);

struct HeadRanking {
  std::vector<int> order;               // best first
  std::vector<double> mean_importance;  // indexed by head
};
HeadRanking rank_heads_over_corpus(const Model& model, const ParallelCorpus& corpus, SiteId site,
                                   int max_sentences = -1);

struct PruneEvalResult {
  double valid_l_c = 0.0;
  double bleu = 0.0;
  std::vector<int> pruned_heads;
};

// Evaluation-time ablation: zero the listed heads at `site` (renormalizing
// the importance over survivors unless disabled) and measure teacher-forced
// cross entropy plus decoded BLEU on `corpus`. Model parameters are untouched.
PruneEvalResult prune_and_eval(const Model& model, const ParallelCorpus& corpus,
                               const PruneSpec& prune, int beam, int max_tokens = 1024);

struct PeakAttentionStats {
  double mean_row_max = 0.0;  // mean over target rows of the row maximum
  double overall_max = 0.0;
  int sentences = 0;
};

// Peak of the head-averaged last-layer encoder-decoder attention, a
// diagnostic for how concentrated the source alignment is.
PeakAttentionStats peak_attention(const Model& model, const ParallelCorpus& corpus,
                                  int max_sentences = -1);

// CSV with a header row of column labels and a leading row-label column,
// 6-decimal values; plus a JSON sidecar <path>.meta.json.
void write_dump_csv(const AttentionDump& dump, const std::string& path,
                    const std::string& checkpoint, const std::string& sentence);
AttentionDump read_dump_csv(const std::string& path);

// Heatmap rendering: .ppm binary image, or a gnuplot-compatible matrix file
// for any other extension.
void render_heatmap(const AttentionDump& dump, const std::string& out_path, int cell_px = 24);

}  // namespace dhicm
