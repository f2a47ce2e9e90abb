#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dhicm/attention.hpp"
#include "dhicm/data.hpp"
#include "dhicm/losses.hpp"
#include "dhicm/rng.hpp"
#include "dhicm/tensor.hpp"

namespace dhicm {

struct ModelConfig {
  int d = 64;
  int heads = 4;
  int d_m = 64;
  int enc_layers = 2;
  int dec_layers = 2;
  int ffn_dim = 128;
  real dropout = 0.1;
  real attention_dropout = 0.0;
  real activation_dropout = 0.0;
  real dhicm_dropout = 0.0;
  real label_smoothing = 0.1;
  real lambda = 0.1;
  std::set<SiteId> placement;  // sublayers using the importance combine
  int src_vocab = 0;
  int tgt_vocab = 0;
  int max_len = 32;
  bool tie_embeddings = true;  // honored only when vocabularies are shared
  std::uint64_t seed = 1;

  int d_k() const { return d / heads; }
  bool tied() const { return tie_embeddings && src_vocab == tgt_vocab; }
  void validate() const;

  // Last-layer self-attention of the encoder and decoder plus the last-layer
  // encoder-decoder attention.
  static std::set<SiteId> default_placement(int enc_layers, int dec_layers);

  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);
};

struct LayerNormParams {
  Tensor gain, bias;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;
};

// One attention sublayer: pre-norm, projections, and either the baseline
// concat+projection combine or the importance-weighted combine.
struct AttentionBlock {
  LayerNormParams ln;
  MhaParams mha;
  std::optional<DhicmParams> dhicm;
};

struct EncoderLayer {
  AttentionBlock self_attn;
  LayerNormParams ffn_ln;
  FfnParams ffn;
};

struct DecoderLayer {
  AttentionBlock self_attn;
  AttentionBlock cross_attn;
  LayerNormParams ffn_ln;
  FfnParams ffn;
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;             // required when training with nonzero dropout
  bool retain_cross_attn = false;
  const PruneSpec* prune = nullptr;
};

// Encoder-decoder attention weights of one (layer, sentence, head).
struct CrossAttnDump {
  int layer = 0;
  int sentence = 0;
  int head = 0;
  int rows = 0, cols = 0;
  std::vector<real> weights;  // row-major [rows, cols]
};

struct ForwardResult {
  Tensor logits;  // [batch * tgt_len, tgt_vocab]
  std::vector<ImportanceRecord> records;
  std::vector<CrossAttnDump> cross_attn;
  int batch = 0, src_len = 0, tgt_len = 0;
};

struct EncodedSource {
  Tensor memory;                      // [src_len, d]
  std::vector<std::uint8_t> pad;      // 1 = real
};

// Pre-layer-norm encoder-decoder transformer with sinusoidal position
// encodings and configurable placement of the importance combine.
class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  Tensor* find_parameter(const std::string& name);
  std::size_t parameter_count() const;

  void zero_grad();

  // Teacher-forced forward over a padded batch. Decoder self-attention is
  // causal; padding is masked everywhere. Throws when a sequence exceeds the
  // configured maximum length.
  ForwardResult forward(const Batch& batch, const ForwardOptions& opts) const;

  // Single-sentence paths used by decoding (evaluation mode, no tape).
  EncodedSource encode(const std::vector<int>& src_framed, const PruneSpec* prune = nullptr) const;
  std::vector<real> next_token_logits(const EncodedSource& enc,
                                      const std::vector<int>& tgt_prefix,
                                      const PruneSpec* prune = nullptr) const;

  bool has_site(const SiteId& site) const;

 private:
  void register_params();
  void init_params();

  Tensor positional_rows(int len) const;

  ModelConfig cfg_;
  Tensor src_embed_;
  Tensor tgt_embed_;  // same node as src_embed_ when tied
  Tensor out_proj_;   // [d, tgt_vocab]
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
  LayerNormParams enc_final_ln_;
  LayerNormParams dec_final_ln_;
  Tensor pos_;  // [max_len, d] fixed sinusoidal table

  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace dhicm
