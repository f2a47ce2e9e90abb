#include "dhicm/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dhicm {

std::string to_string(const SiteId& site) {
  const char* kind = nullptr;
  switch (site.kind) {
    case AttnKind::EncoderSelf: kind = "encoder-self"; break;
    case AttnKind::DecoderSelf: kind = "decoder-self"; break;
    case AttnKind::DecoderCross: kind = "decoder-encdec"; break;
  }
  return std::string(kind) + ":" + std::to_string(site.layer);
}

SiteId parse_site(const std::string& text) {
  auto colon = text.rfind(':');
  if (colon == std::string::npos) {
    throw std::invalid_argument("site: expected '<kind>:<layer>', got '" + text + "'");
  }
  const std::string kind = text.substr(0, colon);
  SiteId site;
  if (kind == "encoder-self") {
    site.kind = AttnKind::EncoderSelf;
  } else if (kind == "decoder-self") {
    site.kind = AttnKind::DecoderSelf;
  } else if (kind == "decoder-encdec") {
    site.kind = AttnKind::DecoderCross;
  } else {
    throw std::invalid_argument("site: unknown kind '" + kind +
                                "' (expected encoder-self, decoder-self or decoder-encdec)");
  }
  try {
    site.layer = std::stoi(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw std::invalid_argument("site: bad layer index in '" + text + "'");
  }
  if (site.layer < 0) throw std::invalid_argument("site: negative layer in '" + text + "'");
  return site;
}

std::size_t DhicmParams::parameter_count() const {
  return w.numel() + u.numel() + v.numel() + w_s.numel();
}

std::size_t count_dhicm_params(int d, int heads, int d_m, int n_sites) {
  if (heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("count_dhicm_params: heads must divide d");
  }
  const std::size_t dk = static_cast<std::size_t>(d / heads);
  const std::size_t per_site = 2 * static_cast<std::size_t>(d_m) * dk +
                               2 * static_cast<std::size_t>(d_m) * static_cast<std::size_t>(d);
  return per_site * static_cast<std::size_t>(n_sites);
}

Tensor single_head_attention(const Tensor& X, const Tensor& Y, const Tensor& wq, const Tensor& wk,
                             const Tensor& wv, const Tensor& mask) {
  const int dk = wq.dim(1);
  Tensor q = matmul(Y, wq);                       // [M, d_k]
  Tensor k = matmul(X, wk);                       // [N, d_k]
  Tensor v = matmul(X, wv);                       // [N, d_k]
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<real>(dk)));
  Tensor probs = softmax(scores, -1, mask);       // all-masked rows become zero
  return matmul(probs, v);
}

HeadOutputs multi_head_forward(const Tensor& X, const Tensor& Y, const MhaParams& params,
                               const Tensor& mask, real attn_dropout, bool training, Rng* rng,
                               std::vector<Tensor>* probs_out) {
  const int H = params.heads;
  const int dk = params.d_k();
  Tensor q = matmul(Y, params.wq);  // [M, H*d_k]
  Tensor k = matmul(X, params.wk);  // [N, H*d_k]
  Tensor v = matmul(X, params.wv);  // [N, H*d_k]

  HeadOutputs out;
  out.head.reserve(H);
  const real inv_sqrt_dk = 1.0 / std::sqrt(static_cast<real>(dk));
  for (int h = 0; h < H; ++h) {
    Tensor qh = slice_cols(q, h * dk, dk);
    Tensor kh = slice_cols(k, h * dk, dk);
    Tensor vh = slice_cols(v, h * dk, dk);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
    Tensor probs = softmax(scores, -1, mask);
    if (probs_out) probs_out->push_back(probs);
    if (training && attn_dropout > 0.0) {
      if (!rng) throw std::invalid_argument("multi_head_forward: dropout requires an rng");
      probs = dropout(probs, attn_dropout, training, *rng);
    }
    out.head.push_back(matmul(probs, vh));
  }
  return out;
}

Tensor baseline_combine(const HeadOutputs& o, const Tensor& wo) {
  return matmul(concat_cols(o.head), wo);
}

Tensor dhicm_scores(const Tensor& x_queries, const HeadOutputs& o, const DhicmParams& params,
                    bool training, Rng* rng) {
  if (params.w.dim(0) != params.u.dim(0) || params.w.dim(0) != params.v.dim(0) ||
      params.w.dim(0) != params.w_s.dim(1)) {
    throw std::invalid_argument("dhicm: d_m mismatch across W/U/V/W_s: " + shape_str(params.w.shape()) +
                                " " + shape_str(params.u.shape()) + " " + shape_str(params.v.shape()) +
                                " " + shape_str(params.w_s.shape()));
  }
  const int M = x_queries.dim(0);
  const real inv_sqrt_dm = 1.0 / std::sqrt(static_cast<real>(params.d_m()));

  Tensor ux = matmul(x_queries, transpose(params.u));  // [M, d_m]
  if (training && params.dropout_rate > 0.0) {
    if (!rng) throw std::invalid_argument("dhicm_scores: dropout requires an rng");
    ux = dropout(ux, params.dropout_rate, training, *rng);
  }

  Tensor wt = transpose(params.w);  // [d_k, d_m]
  std::vector<Tensor> cols;
  cols.reserve(o.head.size());
  for (const Tensor& oh : o.head) {
    Tensor wo_h = matmul(oh, wt);                      // [M, d_m]
    Tensor s_h = sum_last(mul(wo_h, ux));              // [M]
    cols.push_back(reshape(s_h, {M, 1}));
  }
  return scale(concat_cols(cols), inv_sqrt_dm);        // [M, H]
}

Tensor dhicm_importance(const Tensor& scores) { return softmax(scores, -1); }

Tensor dhicm_combine(const Tensor& a, const HeadOutputs& o, const DhicmParams& params) {
  if (a.dim(1) != o.heads()) {
    throw std::invalid_argument("dhicm_combine: importance width " + shape_str(a.shape()) +
                                " does not match " + std::to_string(o.heads()) + " heads");
  }
  Tensor vt = transpose(params.v);  // [d_k, d_m]
  Tensor acc;
  for (int h = 0; h < o.heads(); ++h) {
    Tensor vo_h = matmul(o.head[static_cast<std::size_t>(h)], vt);  // [M, d_m]
    Tensor weighted = mul(slice_cols(a, h, 1), vo_h);
    acc = acc.defined() ? add(acc, weighted) : weighted;
  }
  return matmul(acc, transpose(params.w_s));  // [M, d]
}

namespace {

// Combine restricted to surviving heads (pruned heads' outputs drop out).
Tensor dhicm_combine_subset(const Tensor& a, const HeadOutputs& o, const DhicmParams& params,
                            const std::vector<bool>& keep) {
  Tensor vt = transpose(params.v);
  Tensor acc;
  for (int h = 0; h < o.heads(); ++h) {
    if (!keep[static_cast<std::size_t>(h)]) continue;
    Tensor vo_h = matmul(o.head[static_cast<std::size_t>(h)], vt);
    Tensor weighted = mul(slice_cols(a, h, 1), vo_h);
    acc = acc.defined() ? add(acc, weighted) : weighted;
  }
  if (!acc.defined()) throw std::invalid_argument("dhicm: cannot prune all heads at a site");
  return matmul(acc, transpose(params.w_s));
}

}  // namespace

DhicmForwardResult dhicm_forward(const Tensor& x_queries, const Tensor& memory,
                                 const MhaParams& mha, const DhicmParams& params,
                                 const Tensor& mask, const std::vector<std::uint8_t>& query_pad,
                                 SiteId site, real attn_dropout, bool training, Rng* rng,
                                 const PruneSpec* prune) {
  HeadOutputs o = multi_head_forward(memory, x_queries, mha, mask, attn_dropout, training, rng);
  Tensor s = dhicm_scores(x_queries, o, params, training, rng);

  DhicmForwardResult res;
  if (prune != nullptr) {
    std::vector<bool> keep(static_cast<std::size_t>(o.heads()), true);
    int kept = o.heads();
    for (int h : prune->heads) {
      if (h < 0 || h >= o.heads()) {
        throw std::invalid_argument("prune: head " + std::to_string(h) + " out of range");
      }
      if (keep[static_cast<std::size_t>(h)]) {
        keep[static_cast<std::size_t>(h)] = false;
        --kept;
      }
    }
    if (kept == 0) throw std::invalid_argument("prune: cannot prune all heads");
    Tensor a;
    if (prune->renormalize) {
      // Renormalizing over survivors equals a masked softmax of the scores.
      Tensor keep_mask({1, o.heads()});
      for (int h = 0; h < o.heads(); ++h) keep_mask.at(0, h) = keep[static_cast<std::size_t>(h)] ? 1.0 : 0.0;
      a = softmax(s, -1, keep_mask);
    } else {
      a = dhicm_importance(s);
    }
    res.output = dhicm_combine_subset(a, o, params, keep);
    res.record = ImportanceRecord{site, a, query_pad};
  } else {
    Tensor a = dhicm_importance(s);
    res.output = dhicm_combine(a, o, params);
    res.record = ImportanceRecord{site, a, query_pad};
  }
  return res;
}

}  // namespace dhicm
