#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dhicm/ops.hpp"
#include "dhicm/tensor.hpp"

namespace dhicm {

// An attention sublayer position inside the network. These are the places
// where the head-importance combine can replace the baseline combine.
enum class AttnKind { EncoderSelf, DecoderSelf, DecoderCross };

struct SiteId {
  AttnKind kind = AttnKind::EncoderSelf;
  int layer = 0;

  auto operator<=>(const SiteId&) const = default;
};

std::string to_string(const SiteId& site);
SiteId parse_site(const std::string& text);

// Multi-head attention projections. Per-head blocks live in the columns of
// the combined matrices: head h owns columns [h*d_k, (h+1)*d_k).
struct MhaParams {
  int d = 0;
  int heads = 0;
  Tensor wq;  // [d, H*d_k]
  Tensor wk;  // [d, H*d_k]
  Tensor wv;  // [d, H*d_k]
  Tensor wo;  // [H*d_k, d]; baseline combine only, undefined at importance sites

  int d_k() const { return d / heads; }
};

// Second-level attention parameters. `dropout_rate` is applied to the
// projected query U·x during training.
struct DhicmParams {
  Tensor w;    // [d_m, d_k]
  Tensor u;    // [d_m, d]
  Tensor v;    // [d_m, d_k]
  Tensor w_s;  // [d, d_m]
  real dropout_rate = 0.0;

  int d_m() const { return w.dim(0); }
  int d_k() const { return w.dim(1); }
  int d() const { return u.dim(1); }
  std::size_t parameter_count() const;
};

// Per-head attention outputs at each query position, before any output
// projection. head[h] has shape [M, d_k]; padded query rows are zero.
struct HeadOutputs {
  std::vector<Tensor> head;

  int heads() const { return static_cast<int>(head.size()); }
  int positions() const { return head.empty() ? 0 : head[0].dim(0); }
  int d_k() const { return head.empty() ? 0 : head[0].dim(1); }
};

// Head-importance distributions collected at one site during a forward pass.
// Row m of `a` is the distribution over heads for query position m; rows sum
// to 1. `query_pad` marks real (1) vs padded (0) query positions.
struct ImportanceRecord {
  SiteId site;
  Tensor a;  // [M, H]
  std::vector<std::uint8_t> query_pad;
};

// Evaluation-time head ablation at one site: the listed heads' outputs are
// removed from the combine and, when `renormalize` is set, the importance
// distribution is renormalized over the surviving heads.
struct PruneSpec {
  SiteId site;
  std::vector<int> heads;
  bool renormalize = true;
};

// Scaled dot-product attention for one head.
//   X: [N, d] source vectors, Y: [M, d] query vectors,
//   wq/wk/wv: [d, d_k], mask: [M, N] with 1 = attend allowed.
// Row m is sum_i softmax_i(y_m^T wq wk^T x_i / sqrt(d_k)) * (wv^T x_i).
// An all-masked query row yields a zero output row.
Tensor single_head_attention(const Tensor& X, const Tensor& Y, const Tensor& wq, const Tensor& wk,
                             const Tensor& wv, const Tensor& mask);

// Runs every head of `params` in parallel over the same inputs. Head h of the
// result equals single_head_attention with head h's parameter columns.
// `attn_dropout` (optional) is applied to the attention weights in training.
// `probs_out`, when given, receives each head's attention weight matrix.
HeadOutputs multi_head_forward(const Tensor& X, const Tensor& Y, const MhaParams& params,
                               const Tensor& mask, real attn_dropout = 0.0, bool training = false,
                               Rng* rng = nullptr, std::vector<Tensor>* probs_out = nullptr);

// Baseline combine: concatenate heads along features and project by wo.
Tensor baseline_combine(const HeadOutputs& o, const Tensor& wo);

// Importance scores s[m,h] = O[m,h]^T W^T dropout(U x_m) / sqrt(d_m).
Tensor dhicm_scores(const Tensor& x_queries, const HeadOutputs& o, const DhicmParams& params,
                    bool training = false, Rng* rng = nullptr);

// Row-softmax of the scores over heads: strictly positive, rows sum to 1.
Tensor dhicm_importance(const Tensor& scores);

// Importance-weighted combine: out[m] = W_s * sum_h a[m,h] * (V * O[m,h]).
Tensor dhicm_combine(const Tensor& a, const HeadOutputs& o, const DhicmParams& params);

struct DhicmForwardResult {
  Tensor output;  // [M, d]
  ImportanceRecord record;
};

// Full importance-combined attention sublayer core: multi-head attention,
// head scoring, importance softmax, weighted combine. `query_pad` marks real
// query positions for the record. `prune`, when given, must target this call's
// site and restricts the combine to surviving heads.
DhicmForwardResult dhicm_forward(const Tensor& x_queries, const Tensor& memory,
                                 const MhaParams& mha, const DhicmParams& params,
                                 const Tensor& mask, const std::vector<std::uint8_t>& query_pad,
                                 SiteId site, real attn_dropout = 0.0, bool training = false,
                                 Rng* rng = nullptr, const PruneSpec* prune = nullptr);

// Parameters added by the importance mechanism:
// (2 d_m d_k + 2 d_m d) per site.
std::size_t count_dhicm_params(int d, int heads, int d_m, int n_sites);

}  // namespace dhicm
