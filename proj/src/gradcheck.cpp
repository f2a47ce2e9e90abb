#include "dhicm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dhicm/attention.hpp"
#include "dhicm/data.hpp"
#include "dhicm/losses.hpp"
#include "dhicm/model.hpp"
#include "dhicm/ops.hpp"
#include "dhicm/rng.hpp"

namespace dhicm {

double rel_err(double a, double b, double floor) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

GradCheckReport check_gradients(const std::string& name, const std::function<Tensor()>& loss_fn,
                                const std::vector<std::pair<std::string, Tensor>>& params,
                                double h, double tol) {
  GradCheckReport report;
  report.name = name;

  // Analytic gradients from one taped pass.
  std::vector<std::vector<real>> analytic;
  {
    for (const auto& [pname, p] : params) const_cast<Tensor&>(p).zero_grad();
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
    for (const auto& [pname, p] : params) {
      analytic.push_back(p.has_grad() ? p.node()->grad : std::vector<real>(p.numel(), 0.0));
    }
    for (const auto& [pname, p] : params) const_cast<Tensor&>(p).zero_grad();
  }

  // Central differences, two untaped evaluations per element.
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& tensor = const_cast<Tensor&>(params[pi].second);
    for (std::size_t i = 0; i < tensor.numel(); ++i) {
      const real saved = tensor.value()[i];
      tensor.value()[i] = saved + static_cast<real>(h);
      const double up = loss_fn().item();
      tensor.value()[i] = saved - static_cast<real>(h);
      const double down = loss_fn().item();
      tensor.value()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = rel_err(analytic[pi][i], numeric);
      const double abs_err = std::abs(analytic[pi][i] - numeric);
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_param = params[pi].first + "[" + std::to_string(i) + "]";
      }
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true) {
  Tensor t(std::move(shape), 0.0, requires_grad);
  for (auto& v : t.value()) v = static_cast<real>(rng.uniform(-2.0, 2.0));
  return t;
}

using Params = std::vector<std::pair<std::string, Tensor>>;

GradCheckReport check_primitive(const std::string& name, Rng& rng,
                                const std::function<Tensor(const Params&)>& build, Params params) {
  auto fn = [&build, &params]() { return build(params); };
  (void)rng;
  return check_gradients(name, fn, params, 1e-5, 1e-4);
}

}  // namespace

GradCheckSuiteResult run_gradcheck_suite(std::uint64_t seed) {
  GradCheckSuiteResult suite;
  Rng root(seed);
  auto push = [&suite](GradCheckReport r) {
    suite.all_pass = suite.all_pass && r.pass;
    suite.reports.push_back(std::move(r));
  };

  {
    Rng rng = root.split("matmul");
    Params p{{"a", random_tensor({3, 4}, rng)}, {"b", random_tensor({4, 2}, rng)}};
    push(check_primitive("matmul", rng,
                        [](const Params& q) { return sum_all(matmul(q[0].second, q[1].second)); }, p));
  }
  {
    Rng rng = root.split("add_mul_broadcast");
    Params p{{"a", random_tensor({3, 4}, rng)},
             {"b", random_tensor({4}, rng)},
             {"c", random_tensor({3, 1}, rng)}};
    push(check_primitive("add/mul broadcast", rng,
                        [](const Params& q) {
                          return sum_all(mul(add(q[0].second, q[1].second), q[2].second));
                        },
                        p));
  }
  {
    Rng rng = root.split("softmax");
    Params p{{"x", random_tensor({4, 5}, rng)}};
    Tensor mask({4, 5}, 1.0);
    mask.at(1, 2) = 0.0;
    mask.at(3, 0) = 0.0;
    Tensor weights = random_tensor({4, 5}, rng, false);
    push(check_primitive("softmax (masked)", rng,
                        [mask, weights](const Params& q) {
                          return sum_all(mul(softmax(q[0].second, -1, mask), weights));
                        },
                        p));
  }
  {
    Rng rng = root.split("log_softmax");
    Params p{{"x", random_tensor({4, 6}, rng)}};
    Tensor weights = random_tensor({4, 6}, rng, false);
    push(check_primitive("log_softmax", rng,
                        [weights](const Params& q) {
                          return sum_all(mul(log_softmax(q[0].second), weights));
                        },
                        p));
  }
  {
    Rng rng = root.split("layer_norm");
    Params p{{"x", random_tensor({5, 8}, rng)},
             {"gain", random_tensor({8}, rng)},
             {"bias", random_tensor({8}, rng)}};
    Tensor weights = random_tensor({5, 8}, rng, false);
    push(check_primitive("layer_norm", rng,
                        [weights](const Params& q) {
                          return sum_all(
                              mul(layer_norm(q[0].second, q[1].second, q[2].second), weights));
                        },
                        p));
  }
  {
    Rng rng = root.split("dropout");
    Params p{{"x", random_tensor({6, 6}, rng)}};
    // Fixed op seed: the same mask is drawn in every evaluation.
    push(check_primitive("dropout (fixed seed)", rng,
                        [](const Params& q) {
                          Rng drop_rng(12345);
                          return sum_all(dropout(q[0].second, 0.4, true, drop_rng));
                        },
                        p));
  }
  {
    Rng rng = root.split("embedding");
    Params p{{"table", random_tensor({7, 4}, rng)}};
    const std::vector<int> ids = {0, 3, 3, 6, 1};
    Tensor weights = random_tensor({5, 4}, rng, false);
    push(check_primitive("embedding_lookup", rng,
                        [ids, weights](const Params& q) {
                          return sum_all(mul(embedding_lookup(q[0].second, ids), weights));
                        },
                        p));
  }
  {
    Rng rng = root.split("slice_concat");
    Params p{{"x", random_tensor({6, 8}, rng)}};
    Tensor weights = random_tensor({4, 5}, rng, false);
    push(check_primitive("slice/concat/transpose", rng,
                        [weights](const Params& q) {
                          Tensor a = slice_rows(q[0].second, 1, 4);
                          Tensor b = slice_cols(a, 2, 5);
                          Tensor c = concat_cols({slice_cols(a, 0, 2), slice_cols(a, 5, 3)});
                          return add(sum_all(mul(b, weights)), sum_all(transpose(c)));
                        },
                        p));
  }
  {
    Rng rng = root.split("relu_log");
    Params p{{"x", random_tensor({5, 5}, rng)}};
    push(check_primitive("relu + log(softmax)", rng,
                        [](const Params& q) {
                          Tensor s = softmax(relu(q[0].second), -1);
                          return sum_all(mul(s, log_op(scale(s, 4.0))));
                        },
                        p));
  }
  {
    Rng rng = root.split("attention_core");
    const int d = 8, dk = 4, N = 5, M = 3;
    Params p{{"X", random_tensor({N, d}, rng)}, {"Y", random_tensor({M, d}, rng)},
             {"wq", random_tensor({d, dk}, rng)}, {"wk", random_tensor({d, dk}, rng)},
             {"wv", random_tensor({d, dk}, rng)}};
    Tensor mask({M, N}, 1.0);
    mask.at(0, 4) = 0.0;
    Tensor weights = random_tensor({M, dk}, rng, false);
    push(check_primitive("single_head_attention", rng,
                        [mask, weights](const Params& q) {
                          Tensor o = single_head_attention(q[0].second, q[1].second, q[2].second,
                                                           q[3].second, q[4].second, mask);
                          return sum_all(mul(o, weights));
                        },
                        p));
  }
  {
    Rng rng = root.split("dhicm_core");
    const int d = 8, heads = 2, dm = 8, M = 3, N = 4;
    MhaParams mha;
    mha.d = d;
    mha.heads = heads;
    mha.wq = random_tensor({d, d}, rng);
    mha.wk = random_tensor({d, d}, rng);
    mha.wv = random_tensor({d, d}, rng);
    DhicmParams dp;
    dp.w = random_tensor({dm, d / heads}, rng);
    dp.u = random_tensor({dm, d}, rng);
    dp.v = random_tensor({dm, d / heads}, rng);
    dp.w_s = random_tensor({d, dm}, rng);
    Params p{{"X", random_tensor({N, d}, rng)}, {"Y", random_tensor({M, d}, rng)},
             {"wq", mha.wq},  {"wk", mha.wk},  {"wv", mha.wv},
             {"W", dp.w},     {"U", dp.u},     {"V", dp.v},     {"W_s", dp.w_s}};
    Tensor mask({M, N}, 1.0);
    Tensor weights = random_tensor({M, d}, rng, false);
    std::vector<std::uint8_t> qpad(M, 1);
    push(check_primitive("importance attention sublayer", rng,
                        [mha, dp, mask, weights, qpad](const Params& q) {
                          auto res = dhicm_forward(q[1].second, q[0].second, mha, dp, mask, qpad,
                                                   SiteId{AttnKind::EncoderSelf, 0});
                          Tensor kl = sum_all(kl_to_uniform_rows(res.record.a));
                          return add(sum_all(mul(res.output, weights)), kl);
                        },
                        p));
  }
  {
    // Full model, all three default sites, combined objective.
    ModelConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.d_m = 16;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.ffn_dim = 16;
    cfg.dropout = 0.0;
    cfg.attention_dropout = 0.0;
    cfg.activation_dropout = 0.0;
    cfg.dhicm_dropout = 0.0;
    cfg.label_smoothing = 0.1;
    cfg.lambda = 0.1;
    cfg.placement = ModelConfig::default_placement(1, 1);
    cfg.src_vocab = 11;
    cfg.tgt_vocab = 11;
    cfg.max_len = 8;
    cfg.seed = root.split("full_model").seed();
    Model model(cfg);

    ParallelCorpus corpus;
    corpus.pairs = {{{5, 7, 9}, {6, 8, 4}}, {{4, 10}, {5, 9}}};
    const Batch batch = batchify(corpus, 64).at(0);

    auto fn = [&model, &batch]() {
      ForwardOptions opts;  // evaluation mode keeps the objective deterministic
      ForwardResult fwd = model.forward(batch, opts);
      Tensor l_c = cross_entropy_label_smoothed(fwd.logits, batch.tgt_out, batch.tgt_pad,
                                                model.config().label_smoothing, Vocab::pad_id);
      Tensor l_kl = aggregate_kl(fwd.records);
      return total_loss(l_c, l_kl, model.config().lambda);
    };
    push(check_gradients("full model objective", fn, model.parameters(), 1e-5, 1e-4));
  }
  return suite;
}

}  // namespace dhicm
