#include "dhicm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dhicm/training.hpp"

namespace dhicm {

namespace {

Batch single_pair_batch(const std::vector<int>& src, const std::vector<int>& tgt) {
  ParallelCorpus c;
  c.pairs = {{src, tgt}};
  const int need = std::max(src.size(), tgt.size()) + 2;
  return batchify(c, static_cast<int>(need)).at(0);
}

}  // namespace

AttentionDump dump_encdec_attention(const Model& model, const Vocab& vocab,
                                    const std::vector<int>& src, const std::vector<int>& tgt,
                                    int layer, int head) {
  if (layer < 0 || layer >= model.config().dec_layers) {
    throw std::invalid_argument("dump: layer " + std::to_string(layer) + " outside decoder of " +
                                std::to_string(model.config().dec_layers) + " layers");
  }
  if (head < -1 || head >= model.config().heads) {
    throw std::invalid_argument("dump: head " + std::to_string(head) + " outside " +
                                std::to_string(model.config().heads) + " heads");
  }
  const Batch batch = single_pair_batch(src, tgt);
  ForwardOptions opts;
  opts.retain_cross_attn = true;
  const ForwardResult fwd = model.forward(batch, opts);

  const int M = batch.tgt_len;
  const int N = batch.src_len;
  AttentionDump dump;
  dump.kind = "enc-dec";
  dump.site = "layer " + std::to_string(layer) + (head < 0 ? ", heads averaged" : ", head " +
                                                  std::to_string(head));
  dump.row_labels = vocab.decode(batch.tgt_out);  // the generated tokens
  dump.col_labels = vocab.decode(batch.src);
  dump.matrix.assign(static_cast<std::size_t>(M), std::vector<double>(static_cast<std::size_t>(N), 0.0));

  int found = 0;
  for (const CrossAttnDump& c : fwd.cross_attn) {
    if (c.layer != layer) continue;
    if (head >= 0 && c.head != head) continue;
    for (int i = 0; i < M; ++i) {
      for (int j = 0; j < N; ++j) {
        dump.matrix[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +=
            static_cast<double>(c.weights[static_cast<std::size_t>(i) * N + j]);
      }
    }
    ++found;
  }
  if (found == 0) throw std::runtime_error("dump: no attention retained for layer " + std::to_string(layer));
  if (found > 1) {
    for (auto& row : dump.matrix) {
      for (double& v : row) v /= static_cast<double>(found);
    }
  }
  return dump;
}

AttentionDump dump_head_importance(const Model& model, const Vocab& vocab,
                                   const std::vector<int>& src, const std::vector<int>& tgt,
                                   SiteId site) {
  if (!model.has_site(site)) {
    throw std::invalid_argument("dump: site " + to_string(site) +
                                " has no head-importance mechanism");
  }
  const Batch batch = single_pair_batch(src, tgt);
  ForwardOptions opts;
  const ForwardResult fwd = model.forward(batch, opts);

  const ImportanceRecord* rec = nullptr;
  for (const auto& r : fwd.records) {
    if (r.site == site) rec = &r;
  }
  if (!rec) throw std::runtime_error("dump: no importance record at " + to_string(site));

  AttentionDump dump;
  dump.kind = "head-importance";
  dump.site = to_string(site);
  dump.row_labels =
      site.kind == AttnKind::EncoderSelf ? vocab.decode(batch.src) : vocab.decode(batch.tgt_in);
  const int heads = rec->a.dim(1);
  for (int h = 0; h < heads; ++h) dump.col_labels.push_back("head" + std::to_string(h));
  const int rows = rec->a.dim(0);
  dump.matrix.assign(static_cast<std::size_t>(rows),
                     std::vector<double>(static_cast<std::size_t>(heads), 0.0));
  for (int i = 0; i < rows; ++i) {
    for (int h = 0; h < heads; ++h) {
      dump.matrix[static_cast<std::size_t>(i)][static_cast<std::size_t>(h)] =
          static_cast<double>(rec->a.at(i, h));
    }
  }
  return dump;
}

std::vector<int> rank_heads(const std::vector<AttentionDump>& dumps) {
  if (dumps.empty()) throw std::invalid_argument("rank_heads: no dumps");
  const std::size_t heads = dumps[0].col_labels.size();
  std::vector<double> sums(heads, 0.0);
  std::size_t rows = 0;
  for (const auto& d : dumps) {
    if (d.col_labels.size() != heads) throw std::invalid_argument("rank_heads: inconsistent head counts");
    for (const auto& row : d.matrix) {
      for (std::size_t h = 0; h < heads; ++h) sums[h] += row[h];
      ++rows;
    }
  }
  std::vector<int> order(heads);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&sums](int a, int b) {
    if (sums[static_cast<std::size_t>(a)] != sums[static_cast<std::size_t>(b)]) {
      return sums[static_cast<std::size_t>(a)] > sums[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  (void)rows;
  return order;
}

HeadRanking rank_heads_over_corpus(const Model& model, const ParallelCorpus& corpus, SiteId site,
                                   int max_sentences) {
  if (!model.has_site(site)) {
    throw std::invalid_argument("rank: site " + to_string(site) + " has no head-importance mechanism");
  }
  const int heads = model.config().heads;
  std::vector<double> sums(static_cast<std::size_t>(heads), 0.0);
  std::size_t rows = 0;
  std::size_t limit = max_sentences < 0 ? corpus.pairs.size()
                                        : std::min<std::size_t>(corpus.pairs.size(),
                                                                static_cast<std::size_t>(max_sentences));
  for (std::size_t s = 0; s < limit; ++s) {
    const auto& [src, tgt] = corpus.pairs[s];
    const Batch batch = single_pair_batch(src, tgt);
    ForwardOptions opts;
    const ForwardResult fwd = model.forward(batch, opts);
    for (const auto& rec : fwd.records) {
      if (!(rec.site == site)) continue;
      for (int i = 0; i < rec.a.dim(0); ++i) {
        if (!rec.query_pad[static_cast<std::size_t>(i)]) continue;
        for (int h = 0; h < heads; ++h) sums[static_cast<std::size_t>(h)] += rec.a.at(i, h);
        ++rows;
      }
    }
  }
  if (rows == 0) throw std::runtime_error("rank: no importance rows collected");
  HeadRanking ranking;
  ranking.mean_importance.resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    ranking.mean_importance[static_cast<std::size_t>(h)] =
        sums[static_cast<std::size_t>(h)] / static_cast<double>(rows);
  }
  ranking.order.resize(static_cast<std::size_t>(heads));
  std::iota(ranking.order.begin(), ranking.order.end(), 0);
  std::stable_sort(ranking.order.begin(), ranking.order.end(), [&](int a, int b) {
    const double ma = ranking.mean_importance[static_cast<std::size_t>(a)];
    const double mb = ranking.mean_importance[static_cast<std::size_t>(b)];
    if (ma != mb) return ma > mb;
    return a < b;
  });
  return ranking;
}

PruneEvalResult prune_and_eval(const Model& model, const ParallelCorpus& corpus,
                               const PruneSpec& prune, int beam, int max_tokens) {
  if (!model.has_site(prune.site)) {
    throw std::invalid_argument("prune: site " + to_string(prune.site) +
                                " has no head-importance mechanism");
  }
  std::vector<int> heads = prune.heads;
  std::sort(heads.begin(), heads.end());
  heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
  for (int h : heads) {
    if (h < 0 || h >= model.config().heads) {
      throw std::invalid_argument("prune: head " + std::to_string(h) + " outside " +
                                  std::to_string(model.config().heads) + " heads");
    }
  }
  if (static_cast<int>(heads.size()) >= model.config().heads) {
    throw std::invalid_argument("prune: cannot prune all heads");
  }

  PruneSpec spec = prune;
  spec.heads = heads;
  const PruneSpec* prune_ptr = heads.empty() ? nullptr : &spec;

  PruneEvalResult result;
  result.pruned_heads = heads;
  const auto batches = batchify(corpus, max_tokens);
  result.valid_l_c = evaluate_teacher_forced(model, batches, prune_ptr).l_c;

  std::vector<std::vector<int>> hyps, refs;
  for (const auto& [src, tgt] : corpus.pairs) {
    Hypothesis h = beam_search(model, src, beam, model.config().max_len, 1.0, prune_ptr);
    std::vector<int> tokens = h.tokens;
    if (!tokens.empty() && tokens.back() == Vocab::eos_id) tokens.pop_back();
    hyps.push_back(std::move(tokens));
    refs.push_back(tgt);
  }
  result.bleu = corpus_bleu(hyps, refs);
  return result;
}

PeakAttentionStats peak_attention(const Model& model, const ParallelCorpus& corpus,
                                  int max_sentences) {
  PeakAttentionStats stats;
  const int last_layer = model.config().dec_layers - 1;
  const int heads = model.config().heads;
  double row_max_sum = 0.0;
  std::size_t rows = 0;
  std::size_t limit = max_sentences < 0 ? corpus.pairs.size()
                                        : std::min<std::size_t>(corpus.pairs.size(),
                                                                static_cast<std::size_t>(max_sentences));
  for (std::size_t s = 0; s < limit; ++s) {
    const auto& [src, tgt] = corpus.pairs[s];
    const Batch batch = single_pair_batch(src, tgt);
    ForwardOptions opts;
    opts.retain_cross_attn = true;
    const ForwardResult fwd = model.forward(batch, opts);
    const int M = batch.tgt_len;
    const int N = batch.src_len;
    std::vector<double> averaged(static_cast<std::size_t>(M) * N, 0.0);
    for (const auto& c : fwd.cross_attn) {
      if (c.layer != last_layer) continue;
      for (std::size_t i = 0; i < averaged.size(); ++i) {
        averaged[i] += static_cast<double>(c.weights[i]) / heads;
      }
    }
    for (int i = 0; i < M; ++i) {
      double mx = 0.0;
      for (int j = 0; j < N; ++j) mx = std::max(mx, averaged[static_cast<std::size_t>(i) * N + j]);
      row_max_sum += mx;
      stats.overall_max = std::max(stats.overall_max, mx);
      ++rows;
    }
    ++stats.sentences;
  }
  if (rows > 0) stats.mean_row_max = row_max_sum / static_cast<double>(rows);
  return stats;
}

void write_dump_csv(const AttentionDump& dump, const std::string& path,
                    const std::string& checkpoint, const std::string& sentence) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("dump: cannot write " + path);
  f << "token";
  for (const auto& c : dump.col_labels) f << "," << c;
  f << "\n";
  f << std::fixed << std::setprecision(6);
  for (std::size_t i = 0; i < dump.matrix.size(); ++i) {
    f << dump.row_labels[i];
    for (double v : dump.matrix[i]) f << "," << v;
    f << "\n";
  }
  nlohmann::ordered_json sidecar;
  sidecar["kind"] = dump.kind;
  sidecar["site"] = dump.site;
  sidecar["shape"] = {dump.matrix.size(), dump.col_labels.size()};
  sidecar["checkpoint"] = checkpoint;
  sidecar["sentence"] = sentence;
  std::ofstream side(path + ".meta.json");
  if (!side) throw std::runtime_error("dump: cannot write " + path + ".meta.json");
  side << sidecar.dump(2) << "\n";
}

AttentionDump read_dump_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("dump: cannot read " + path);
  AttentionDump dump;
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("dump: empty file " + path);
  {
    std::istringstream is(line);
    std::string cell;
    bool first = true;
    while (std::getline(is, cell, ',')) {
      if (first) {
        first = false;
      } else {
        dump.col_labels.push_back(cell);
      }
    }
  }
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string cell;
    std::getline(is, cell, ',');
    dump.row_labels.push_back(cell);
    std::vector<double> row;
    while (std::getline(is, cell, ',')) row.push_back(std::stod(cell));
    if (row.size() != dump.col_labels.size()) {
      throw std::runtime_error("dump: ragged row in " + path);
    }
    dump.matrix.push_back(std::move(row));
  }
  return dump;
}

namespace {

// Simple perceptual ramp (dark blue -> green -> yellow).
void colormap(double v, unsigned char rgb[3]) {
  v = std::clamp(v, 0.0, 1.0);
  const double stops[5][3] = {{0.267, 0.005, 0.329},
                              {0.229, 0.322, 0.546},
                              {0.128, 0.567, 0.551},
                              {0.369, 0.789, 0.383},
                              {0.993, 0.906, 0.144}};
  const double t = v * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  for (int c = 0; c < 3; ++c) {
    const double x = stops[i][c] + (stops[i + 1][c] - stops[i][c]) * f;
    rgb[c] = static_cast<unsigned char>(std::lround(x * 255.0));
  }
}

}  // namespace

void render_heatmap(const AttentionDump& dump, const std::string& out_path, int cell_px) {
  const std::size_t rows = dump.matrix.size();
  if (rows == 0) throw std::invalid_argument("heatmap: empty dump");
  const std::size_t cols = dump.matrix[0].size();

  const bool ppm = out_path.size() > 4 && out_path.substr(out_path.size() - 4) == ".ppm";
  if (!ppm) {
    // gnuplot matrix format: one row per line (plot with `matrix image`).
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("heatmap: cannot write " + out_path);
    f << std::setprecision(6) << std::fixed;
    for (const auto& row : dump.matrix) {
      for (std::size_t j = 0; j < row.size(); ++j) {
        if (j) f << " ";
        f << row[j];
      }
      f << "\n";
    }
    return;
  }

  const int W = static_cast<int>(cols) * cell_px;
  const int H = static_cast<int>(rows) * cell_px;
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw std::runtime_error("heatmap: cannot write " + out_path);
  f << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> scanline(static_cast<std::size_t>(W) * 3);
  for (int y = 0; y < H; ++y) {
    const std::size_t i = static_cast<std::size_t>(y) / cell_px;
    for (int x = 0; x < W; ++x) {
      const std::size_t j = static_cast<std::size_t>(x) / cell_px;
      unsigned char rgb[3];
      colormap(dump.matrix[i][j], rgb);
      scanline[static_cast<std::size_t>(x) * 3 + 0] = rgb[0];
      scanline[static_cast<std::size_t>(x) * 3 + 1] = rgb[1];
      scanline[static_cast<std::size_t>(x) * 3 + 2] = rgb[2];
    }
    f.write(reinterpret_cast<const char*>(scanline.data()), static_cast<std::streamsize>(scanline.size()));
  }
}

}  // namespace dhicm
