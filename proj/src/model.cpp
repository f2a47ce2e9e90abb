#include "dhicm/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dhicm {

namespace {

std::string fmt_real(real v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt_int(long long v) { return std::to_string(v); }

}  // namespace

void ModelConfig::validate() const {
  if (d <= 0 || heads <= 0) throw std::invalid_argument("config: d and heads must be positive");
  if (d % heads != 0) {
    throw std::invalid_argument("config: heads (" + std::to_string(heads) + ") must divide d (" +
                                std::to_string(d) + ")");
  }
  if (d_m <= 0) throw std::invalid_argument("config: d_m must be positive");
  if (enc_layers < 1 || dec_layers < 1) throw std::invalid_argument("config: need >= 1 layer per stack");
  if (ffn_dim < 1) throw std::invalid_argument("config: ffn_dim must be positive");
  for (real rate : {dropout, attention_dropout, activation_dropout, dhicm_dropout}) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("config: dropout rates must be in [0,1)");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw std::invalid_argument("config: label_smoothing must be in [0,1)");
  }
  if (lambda < 0.0) throw std::invalid_argument("config: lambda must be >= 0");
  if (src_vocab < 5 || tgt_vocab < 5) {
    throw std::invalid_argument("config: vocab sizes must include reserved ids (>= 5)");
  }
  if (max_len < 4) throw std::invalid_argument("config: max_len must be >= 4");
  for (const auto& site : placement) {
    const int limit = site.kind == AttnKind::EncoderSelf ? enc_layers : dec_layers;
    if (site.layer >= limit) {
      throw std::invalid_argument("config: placement site " + to_string(site) +
                                  " outside architecture (layer count " + std::to_string(limit) + ")");
    }
  }
}

std::set<SiteId> ModelConfig::default_placement(int enc_layers, int dec_layers) {
  return {SiteId{AttnKind::EncoderSelf, enc_layers - 1}, SiteId{AttnKind::DecoderSelf, dec_layers - 1},
          SiteId{AttnKind::DecoderCross, dec_layers - 1}};
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  std::map<std::string, std::string> kv;
  kv["d"] = fmt_int(d);
  kv["heads"] = fmt_int(heads);
  kv["d_m"] = fmt_int(d_m);
  kv["enc_layers"] = fmt_int(enc_layers);
  kv["dec_layers"] = fmt_int(dec_layers);
  kv["ffn_dim"] = fmt_int(ffn_dim);
  kv["dropout"] = fmt_real(dropout);
  kv["attention_dropout"] = fmt_real(attention_dropout);
  kv["activation_dropout"] = fmt_real(activation_dropout);
  kv["dhicm_dropout"] = fmt_real(dhicm_dropout);
  kv["label_smoothing"] = fmt_real(label_smoothing);
  kv["lambda"] = fmt_real(lambda);
  if (placement.empty()) {
    kv["dhicm_placement"] = "none";
  } else {
    std::string joined;
    for (const auto& site : placement) {
      if (!joined.empty()) joined += ",";
      joined += to_string(site);
    }
    kv["dhicm_placement"] = joined;
  }
  kv["src_vocab"] = fmt_int(src_vocab);
  kv["tgt_vocab"] = fmt_int(tgt_vocab);
  kv["max_len"] = fmt_int(max_len);
  kv["tie_embeddings"] = tie_embeddings ? "1" : "0";
  kv["seed"] = std::to_string(seed);
  return kv;
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  auto get = [&kv](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument(std::string("config: missing key '") + key + "'");
    return it->second;
  };
  auto get_or = [&kv](const char* key, const std::string& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
  };
  try {
    cfg.d = std::stoi(get_or("d", "64"));
    cfg.heads = std::stoi(get_or("heads", "4"));
    cfg.d_m = std::stoi(get_or("d_m", std::to_string(cfg.d)));
    cfg.enc_layers = std::stoi(get_or("enc_layers", "2"));
    cfg.dec_layers = std::stoi(get_or("dec_layers", "2"));
    cfg.ffn_dim = std::stoi(get_or("ffn_dim", "128"));
    cfg.dropout = static_cast<real>(std::stod(get_or("dropout", "0.1")));
    cfg.attention_dropout = static_cast<real>(std::stod(get_or("attention_dropout", "0")));
    cfg.activation_dropout = static_cast<real>(std::stod(get_or("activation_dropout", "0")));
    cfg.dhicm_dropout = static_cast<real>(std::stod(get_or("dhicm_dropout", "0")));
    cfg.label_smoothing = static_cast<real>(std::stod(get_or("label_smoothing", "0.1")));
    cfg.lambda = static_cast<real>(std::stod(get_or("lambda", "0.1")));
    cfg.src_vocab = std::stoi(get_or("src_vocab", "0"));
    cfg.tgt_vocab = std::stoi(get_or("tgt_vocab", "0"));
    cfg.max_len = std::stoi(get_or("max_len", "32"));
    cfg.tie_embeddings = get_or("tie_embeddings", "1") != "0";
    cfg.seed = std::stoull(get_or("seed", "1"));
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("config: bad numeric value (") + e.what() + ")");
  }
  const std::string placement = get_or("dhicm_placement", "default");
  if (placement == "none") {
    cfg.placement.clear();
  } else if (placement == "default") {
    cfg.placement = default_placement(cfg.enc_layers, cfg.dec_layers);
  } else {
    std::istringstream is(placement);
    std::string item;
    while (std::getline(is, item, ',')) {
      if (!item.empty()) cfg.placement.insert(parse_site(item));
    }
  }
  (void)get;
  return cfg;
}

// ---- parameter construction ----

namespace {

Tensor xavier(std::vector<int> shape, Rng rng) {
  const real limit = std::sqrt(6.0 / (static_cast<real>(shape[0]) + static_cast<real>(shape[1])));
  Tensor t(shape, 0.0, true);
  for (auto& v : t.value()) v = static_cast<real>(rng.uniform(-limit, limit));
  return t;
}

Tensor normal_init(std::vector<int> shape, real std_dev, Rng rng) {
  Tensor t(shape, 0.0, true);
  for (auto& v : t.value()) v = static_cast<real>(rng.normal() * std_dev);
  return t;
}

}  // namespace

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();

  Rng init = Rng(cfg_.seed).split("init");
  auto xav = [&](const std::string& name, int rows, int cols) {
    return xavier({rows, cols}, init.split(name));
  };

  const int d = cfg_.d;
  if (cfg_.tied()) {
    src_embed_ = normal_init({cfg_.src_vocab, d}, std::pow(static_cast<real>(d), -0.5),
                             init.split("embed.shared"));
    tgt_embed_ = src_embed_;
  } else {
    src_embed_ = normal_init({cfg_.src_vocab, d}, std::pow(static_cast<real>(d), -0.5),
                             init.split("embed.src"));
    tgt_embed_ = normal_init({cfg_.tgt_vocab, d}, std::pow(static_cast<real>(d), -0.5),
                             init.split("embed.tgt"));
  }
  out_proj_ = xav("out_proj", d, cfg_.tgt_vocab);

  auto make_ln = [&](const std::string& name) {
    LayerNormParams ln;
    ln.gain = Tensor({d}, 1.0, true);
    ln.bias = Tensor({d}, 0.0, true);
    (void)name;
    return ln;
  };
  auto make_attn = [&](const std::string& prefix, SiteId site) {
    AttentionBlock blk;
    blk.ln = make_ln(prefix + ".ln");
    blk.mha.d = d;
    blk.mha.heads = cfg_.heads;
    blk.mha.wq = xav(prefix + ".wq", d, d);
    blk.mha.wk = xav(prefix + ".wk", d, d);
    blk.mha.wv = xav(prefix + ".wv", d, d);
    if (cfg_.placement.count(site)) {
      DhicmParams p;
      p.w = xav(prefix + ".dhicm.w", cfg_.d_m, cfg_.d_k());
      p.u = xav(prefix + ".dhicm.u", cfg_.d_m, d);
      p.v = xav(prefix + ".dhicm.v", cfg_.d_m, cfg_.d_k());
      p.w_s = xav(prefix + ".dhicm.w_s", d, cfg_.d_m);
      p.dropout_rate = cfg_.dhicm_dropout;
      blk.dhicm = std::move(p);
    } else {
      blk.mha.wo = xav(prefix + ".wo", d, d);
    }
    return blk;
  };
  auto make_ffn = [&](const std::string& prefix) {
    FfnParams f;
    f.w1 = xav(prefix + ".w1", d, cfg_.ffn_dim);
    f.b1 = Tensor({cfg_.ffn_dim}, 0.0, true);
    f.w2 = xav(prefix + ".w2", cfg_.ffn_dim, d);
    f.b2 = Tensor({d}, 0.0, true);
    return f;
  };

  enc_.reserve(static_cast<std::size_t>(cfg_.enc_layers));
  for (int l = 0; l < cfg_.enc_layers; ++l) {
    EncoderLayer layer;
    layer.self_attn = make_attn("enc." + std::to_string(l) + ".self", SiteId{AttnKind::EncoderSelf, l});
    layer.ffn_ln = make_ln("enc." + std::to_string(l) + ".ffn_ln");
    layer.ffn = make_ffn("enc." + std::to_string(l) + ".ffn");
    enc_.push_back(std::move(layer));
  }
  enc_final_ln_ = make_ln("enc.final_ln");

  dec_.reserve(static_cast<std::size_t>(cfg_.dec_layers));
  for (int l = 0; l < cfg_.dec_layers; ++l) {
    DecoderLayer layer;
    layer.self_attn = make_attn("dec." + std::to_string(l) + ".self", SiteId{AttnKind::DecoderSelf, l});
    layer.cross_attn =
        make_attn("dec." + std::to_string(l) + ".cross", SiteId{AttnKind::DecoderCross, l});
    layer.ffn_ln = make_ln("dec." + std::to_string(l) + ".ffn_ln");
    layer.ffn = make_ffn("dec." + std::to_string(l) + ".ffn");
    dec_.push_back(std::move(layer));
  }
  dec_final_ln_ = make_ln("dec.final_ln");

  // Fixed sinusoidal position table; not a parameter.
  pos_ = Tensor({cfg_.max_len, d});
  for (int p = 0; p < cfg_.max_len; ++p) {
    for (int i = 0; i < d; i += 2) {
      const real angle = static_cast<real>(p) /
                         std::pow(static_cast<real>(10000.0), static_cast<real>(i) / static_cast<real>(d));
      pos_.at(p, i) = std::sin(angle);
      if (i + 1 < d) pos_.at(p, i + 1) = std::cos(angle);
    }
  }

  register_params();
}

void Model::register_params() {
  auto reg = [this](const std::string& name, const Tensor& t) { params_.emplace_back(name, t); };
  if (cfg_.tied()) {
    reg("embed.shared", src_embed_);
  } else {
    reg("embed.src", src_embed_);
    reg("embed.tgt", tgt_embed_);
  }
  auto reg_ln = [&](const std::string& prefix, const LayerNormParams& ln) {
    reg(prefix + ".gain", ln.gain);
    reg(prefix + ".bias", ln.bias);
  };
  auto reg_attn = [&](const std::string& prefix, const AttentionBlock& blk) {
    reg_ln(prefix + ".ln", blk.ln);
    reg(prefix + ".wq", blk.mha.wq);
    reg(prefix + ".wk", blk.mha.wk);
    reg(prefix + ".wv", blk.mha.wv);
    if (blk.dhicm) {
      reg(prefix + ".dhicm.w", blk.dhicm->w);
      reg(prefix + ".dhicm.u", blk.dhicm->u);
      reg(prefix + ".dhicm.v", blk.dhicm->v);
      reg(prefix + ".dhicm.w_s", blk.dhicm->w_s);
    } else {
      reg(prefix + ".wo", blk.mha.wo);
    }
  };
  auto reg_ffn = [&](const std::string& prefix, const FfnParams& f) {
    reg(prefix + ".w1", f.w1);
    reg(prefix + ".b1", f.b1);
    reg(prefix + ".w2", f.w2);
    reg(prefix + ".b2", f.b2);
  };
  for (int l = 0; l < cfg_.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    reg_attn(p + ".self", enc_[static_cast<std::size_t>(l)].self_attn);
    reg_ln(p + ".ffn_ln", enc_[static_cast<std::size_t>(l)].ffn_ln);
    reg_ffn(p + ".ffn", enc_[static_cast<std::size_t>(l)].ffn);
  }
  reg_ln("enc.final_ln", enc_final_ln_);
  for (int l = 0; l < cfg_.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    reg_attn(p + ".self", dec_[static_cast<std::size_t>(l)].self_attn);
    reg_attn(p + ".cross", dec_[static_cast<std::size_t>(l)].cross_attn);
    reg_ln(p + ".ffn_ln", dec_[static_cast<std::size_t>(l)].ffn_ln);
    reg_ffn(p + ".ffn", dec_[static_cast<std::size_t>(l)].ffn);
  }
  reg_ln("dec.final_ln", dec_final_ln_);
  reg("out_proj", out_proj_);
}

Tensor* Model::find_parameter(const std::string& name) {
  for (auto& [n, t] : params_) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

bool Model::has_site(const SiteId& site) const { return cfg_.placement.count(site) != 0; }

Tensor Model::positional_rows(int len) const {
  Tensor pe({len, cfg_.d});
  std::copy_n(pos_.value().data(), static_cast<std::size_t>(len) * cfg_.d, pe.value().data());
  return pe;
}

// ---- forward ----

namespace {

Tensor maybe_dropout(const Tensor& x, real rate, const ForwardOptions& opts) {
  if (!opts.training || rate == 0.0) return x;
  if (!opts.rng) throw std::invalid_argument("forward: training mode with dropout requires an rng");
  return dropout(x, rate, true, *opts.rng);
}

// Attention mask for one sentence; 1 = attend allowed. Padded query rows are
// fully masked so their head outputs come out exactly zero.
Tensor build_mask(const std::uint8_t* qpad, int lq, const std::uint8_t* kpad, int lk, bool causal) {
  Tensor mask({lq, lk});
  for (int i = 0; i < lq; ++i) {
    if (!qpad[i]) continue;
    for (int j = 0; j < lk; ++j) {
      if (!kpad[j]) continue;
      if (causal && j > i) continue;
      mask.at(i, j) = 1.0;
    }
  }
  return mask;
}

}  // namespace

// Shared attention sublayer: pre-norm, per-sentence attention, residual.
// `memory` null means self-attention. Collects an ImportanceRecord at
// importance sites and cross-attention weights when requested.
namespace {

struct SublayerArgs {
  const ModelConfig* cfg;
  const ForwardOptions* opts;
  SiteId site;
  int batch, lq, lk;
  const std::uint8_t* qpad;  // [batch*lq]
  const std::uint8_t* kpad;  // [batch*lk]
  bool causal;
  std::vector<ImportanceRecord>* records;
  std::vector<CrossAttnDump>* cross;  // non-null to retain attention weights
};

Tensor attention_sublayer(const AttentionBlock& blk, const Tensor& x, const Tensor* memory,
                          const SublayerArgs& a) {
  Tensor normed = layer_norm(x, blk.ln.gain, blk.ln.bias);
  const PruneSpec* prune = nullptr;
  if (a.opts->prune && a.opts->prune->site == a.site) {
    if (!blk.dhicm) {
      throw std::invalid_argument("prune: site " + to_string(a.site) +
                                  " has no head-importance mechanism");
    }
    prune = a.opts->prune;
  }

  std::vector<Tensor> parts;
  parts.reserve(static_cast<std::size_t>(a.batch));
  std::vector<Tensor> importance_parts;
  for (int b = 0; b < a.batch; ++b) {
    Tensor xq_n = slice_rows(normed, b * a.lq, a.lq);
    Tensor kv = memory ? slice_rows(*memory, b * a.lk, a.lk) : xq_n;
    Tensor mask = build_mask(a.qpad + static_cast<std::size_t>(b) * a.lq, a.lq,
                             a.kpad + static_cast<std::size_t>(b) * a.lk, a.lk, a.causal);

    std::vector<Tensor> probs;
    std::vector<Tensor>* probs_out = a.cross ? &probs : nullptr;
    HeadOutputs heads = multi_head_forward(kv, xq_n, blk.mha, mask, a.cfg->attention_dropout,
                                           a.opts->training, a.opts->rng, probs_out);
    if (a.cross) {
      for (int h = 0; h < static_cast<int>(probs.size()); ++h) {
        CrossAttnDump dump;
        dump.layer = a.site.layer;
        dump.sentence = b;
        dump.head = h;
        dump.rows = a.lq;
        dump.cols = a.lk;
        dump.weights = probs[static_cast<std::size_t>(h)].value();
        a.cross->push_back(std::move(dump));
      }
    }

    if (blk.dhicm) {
      Tensor x_pre = slice_rows(x, b * a.lq, a.lq);  // pre-norm residual-stream query
      Tensor s = dhicm_scores(x_pre, heads, *blk.dhicm, a.opts->training, a.opts->rng);
      Tensor imp;
      if (prune && prune->renormalize) {
        Tensor keep_mask({1, blk.mha.heads}, 1.0);
        for (int h : prune->heads) keep_mask.at(0, h) = 0.0;
        imp = softmax(s, -1, keep_mask);
      } else {
        imp = dhicm_importance(s);
      }
      Tensor out_b;
      if (prune) {
        std::vector<bool> keep(static_cast<std::size_t>(blk.mha.heads), true);
        for (int h : prune->heads) {
          if (h < 0 || h >= blk.mha.heads) {
            throw std::invalid_argument("prune: head " + std::to_string(h) + " out of range");
          }
          keep[static_cast<std::size_t>(h)] = false;
        }
        if (std::none_of(keep.begin(), keep.end(), [](bool k) { return k; })) {
          throw std::invalid_argument("prune: cannot prune all heads");
        }
        Tensor vt = transpose(blk.dhicm->v);
        Tensor acc;
        for (int h = 0; h < blk.mha.heads; ++h) {
          if (!keep[static_cast<std::size_t>(h)]) continue;
          Tensor vo = matmul(heads.head[static_cast<std::size_t>(h)], vt);
          Tensor weighted = mul(slice_cols(imp, h, 1), vo);
          acc = acc.defined() ? add(acc, weighted) : weighted;
        }
        out_b = matmul(acc, transpose(blk.dhicm->w_s));
      } else {
        out_b = dhicm_combine(imp, heads, *blk.dhicm);
      }
      importance_parts.push_back(imp);
      parts.push_back(out_b);
    } else {
      parts.push_back(baseline_combine(heads, blk.mha.wo));
    }
  }

  if (blk.dhicm && a.records) {
    ImportanceRecord rec;
    rec.site = a.site;
    rec.a = a.batch == 1 ? importance_parts[0] : concat_rows(importance_parts);
    rec.query_pad.assign(a.qpad, a.qpad + static_cast<std::size_t>(a.batch) * a.lq);
    a.records->push_back(std::move(rec));
  }

  Tensor sub_out = a.batch == 1 ? parts[0] : concat_rows(parts);
  return add(x, maybe_dropout(sub_out, a.cfg->dropout, *a.opts));
}

Tensor ffn_sublayer(const FfnParams& f, const LayerNormParams& ln, const Tensor& x,
                    const ModelConfig& cfg, const ForwardOptions& opts) {
  Tensor h = layer_norm(x, ln.gain, ln.bias);
  h = relu(add(matmul(h, f.w1), f.b1));
  h = maybe_dropout(h, cfg.activation_dropout, opts);
  h = add(matmul(h, f.w2), f.b2);
  return add(x, maybe_dropout(h, cfg.dropout, opts));
}

}  // namespace

ForwardResult Model::forward(const Batch& batch, const ForwardOptions& opts) const {
  if (batch.src_len > cfg_.max_len || batch.tgt_len > cfg_.max_len) {
    throw std::invalid_argument("forward: sequence exceeds maximum length " +
                                std::to_string(cfg_.max_len));
  }
  if (opts.prune && !has_site(opts.prune->site)) {
    throw std::invalid_argument("prune: site " + to_string(opts.prune->site) +
                                " has no head-importance mechanism");
  }

  ForwardResult res;
  res.batch = batch.size;
  res.src_len = batch.src_len;
  res.tgt_len = batch.tgt_len;

  const int B = batch.size;
  const int N = batch.src_len;
  const int M = batch.tgt_len;
  const real emb_scale = std::sqrt(static_cast<real>(cfg_.d));

  // Encoder.
  Tensor x = scale(embedding_lookup(src_embed_, batch.src), emb_scale);
  {
    Tensor pe({B * N, cfg_.d});
    for (int b = 0; b < B; ++b) {
      std::copy_n(pos_.value().data(), static_cast<std::size_t>(N) * cfg_.d,
                  pe.value().data() + static_cast<std::size_t>(b) * N * cfg_.d);
    }
    x = add(x, pe);
  }
  x = maybe_dropout(x, cfg_.dropout, opts);
  for (int l = 0; l < cfg_.enc_layers; ++l) {
    SublayerArgs a;
    a.cfg = &cfg_;
    a.opts = &opts;
    a.site = SiteId{AttnKind::EncoderSelf, l};
    a.batch = B;
    a.lq = N;
    a.lk = N;
    a.qpad = batch.src_pad.data();
    a.kpad = batch.src_pad.data();
    a.causal = false;
    a.records = &res.records;
    a.cross = nullptr;
    x = attention_sublayer(enc_[static_cast<std::size_t>(l)].self_attn, x, nullptr, a);
    x = ffn_sublayer(enc_[static_cast<std::size_t>(l)].ffn, enc_[static_cast<std::size_t>(l)].ffn_ln, x,
                     cfg_, opts);
  }
  Tensor memory = layer_norm(x, enc_final_ln_.gain, enc_final_ln_.bias);

  // Decoder.
  Tensor y = scale(embedding_lookup(tgt_embed_, batch.tgt_in), emb_scale);
  {
    Tensor pe({B * M, cfg_.d});
    for (int b = 0; b < B; ++b) {
      std::copy_n(pos_.value().data(), static_cast<std::size_t>(M) * cfg_.d,
                  pe.value().data() + static_cast<std::size_t>(b) * M * cfg_.d);
    }
    y = add(y, pe);
  }
  y = maybe_dropout(y, cfg_.dropout, opts);
  for (int l = 0; l < cfg_.dec_layers; ++l) {
    SublayerArgs self_args;
    self_args.cfg = &cfg_;
    self_args.opts = &opts;
    self_args.site = SiteId{AttnKind::DecoderSelf, l};
    self_args.batch = B;
    self_args.lq = M;
    self_args.lk = M;
    self_args.qpad = batch.tgt_pad.data();
    self_args.kpad = batch.tgt_pad.data();
    self_args.causal = true;
    self_args.records = &res.records;
    self_args.cross = nullptr;
    y = attention_sublayer(dec_[static_cast<std::size_t>(l)].self_attn, y, nullptr, self_args);

    SublayerArgs cross_args = self_args;
    cross_args.site = SiteId{AttnKind::DecoderCross, l};
    cross_args.lk = N;
    cross_args.kpad = batch.src_pad.data();
    cross_args.causal = false;
    cross_args.cross = opts.retain_cross_attn ? &res.cross_attn : nullptr;
    y = attention_sublayer(dec_[static_cast<std::size_t>(l)].cross_attn, y, &memory, cross_args);

    y = ffn_sublayer(dec_[static_cast<std::size_t>(l)].ffn, dec_[static_cast<std::size_t>(l)].ffn_ln, y,
                     cfg_, opts);
  }
  y = layer_norm(y, dec_final_ln_.gain, dec_final_ln_.bias);
  res.logits = matmul(y, out_proj_);
  return res;
}

EncodedSource Model::encode(const std::vector<int>& src_framed, const PruneSpec* prune) const {
  Batch b;
  b.size = 1;
  b.src_len = static_cast<int>(src_framed.size());
  b.tgt_len = 1;
  b.src = src_framed;
  b.src_pad.assign(src_framed.size(), 1);
  b.tgt_in = {Vocab::bos_id};
  b.tgt_out = {Vocab::eos_id};
  b.tgt_pad = {1};
  if (b.src_len > cfg_.max_len) {
    throw std::invalid_argument("encode: sequence exceeds maximum length " +
                                std::to_string(cfg_.max_len));
  }

  ForwardOptions opts;
  opts.prune = prune;
  if (prune && !has_site(prune->site)) {
    throw std::invalid_argument("prune: site " + to_string(prune->site) +
                                " has no head-importance mechanism");
  }

  // Encoder-only pass (mirrors forward()'s encoder half).
  const int N = b.src_len;
  const real emb_scale = std::sqrt(static_cast<real>(cfg_.d));
  Tensor x = scale(embedding_lookup(src_embed_, b.src), emb_scale);
  x = add(x, positional_rows(N));
  for (int l = 0; l < cfg_.enc_layers; ++l) {
    SublayerArgs a;
    a.cfg = &cfg_;
    a.opts = &opts;
    a.site = SiteId{AttnKind::EncoderSelf, l};
    a.batch = 1;
    a.lq = N;
    a.lk = N;
    a.qpad = b.src_pad.data();
    a.kpad = b.src_pad.data();
    a.causal = false;
    a.records = nullptr;
    a.cross = nullptr;
    x = attention_sublayer(enc_[static_cast<std::size_t>(l)].self_attn, x, nullptr, a);
    x = ffn_sublayer(enc_[static_cast<std::size_t>(l)].ffn, enc_[static_cast<std::size_t>(l)].ffn_ln, x,
                     cfg_, opts);
  }
  EncodedSource enc;
  enc.memory = layer_norm(x, enc_final_ln_.gain, enc_final_ln_.bias);
  enc.pad.assign(src_framed.size(), 1);
  return enc;
}

std::vector<real> Model::next_token_logits(const EncodedSource& enc,
                                           const std::vector<int>& tgt_prefix,
                                           const PruneSpec* prune) const {
  const int M = static_cast<int>(tgt_prefix.size());
  if (M < 1) throw std::invalid_argument("next_token_logits: empty prefix (needs bos)");
  if (M > cfg_.max_len) {
    throw std::invalid_argument("next_token_logits: prefix exceeds maximum length " +
                                std::to_string(cfg_.max_len));
  }
  ForwardOptions opts;
  opts.prune = prune;

  const int N = enc.memory.dim(0);
  std::vector<std::uint8_t> qpad(static_cast<std::size_t>(M), 1);
  const real emb_scale = std::sqrt(static_cast<real>(cfg_.d));
  Tensor y = scale(embedding_lookup(tgt_embed_, tgt_prefix), emb_scale);
  y = add(y, positional_rows(M));
  for (int l = 0; l < cfg_.dec_layers; ++l) {
    SublayerArgs self_args;
    self_args.cfg = &cfg_;
    self_args.opts = &opts;
    self_args.site = SiteId{AttnKind::DecoderSelf, l};
    self_args.batch = 1;
    self_args.lq = M;
    self_args.lk = M;
    self_args.qpad = qpad.data();
    self_args.kpad = qpad.data();
    self_args.causal = true;
    self_args.records = nullptr;
    self_args.cross = nullptr;
    y = attention_sublayer(dec_[static_cast<std::size_t>(l)].self_attn, y, nullptr, self_args);

    SublayerArgs cross_args = self_args;
    cross_args.site = SiteId{AttnKind::DecoderCross, l};
    cross_args.lk = N;
    cross_args.kpad = enc.pad.data();
    cross_args.causal = false;
    y = attention_sublayer(dec_[static_cast<std::size_t>(l)].cross_attn, y, &enc.memory, cross_args);

    y = ffn_sublayer(dec_[static_cast<std::size_t>(l)].ffn, dec_[static_cast<std::size_t>(l)].ffn_ln, y,
                     cfg_, opts);
  }
  y = layer_norm(y, dec_final_ln_.gain, dec_final_ln_.bias);
  Tensor logits = matmul(slice_rows(y, M - 1, 1), out_proj_);
  return logits.value();
}

}  // namespace dhicm
