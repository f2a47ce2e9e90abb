#include "dhicm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dhicm {

namespace {
std::vector<real>& grad_of(TensorData* n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
  return n->grad;
}
}  // namespace

Tensor cross_entropy_label_smoothed(const Tensor& logits, const std::vector<int>& targets,
                                    const std::vector<std::uint8_t>& pad_mask, real eps,
                                    int pad_id) {
  if (logits.ndim() != 2) {
    throw std::invalid_argument("cross_entropy: logits must be [positions, vocab], got " +
                                shape_str(logits.shape()));
  }
  const int M = logits.dim(0);
  const int V = logits.dim(1);
  if (static_cast<int>(targets.size()) != M || static_cast<int>(pad_mask.size()) != M) {
    throw std::invalid_argument("cross_entropy: targets/mask length must match logits rows");
  }
  if (eps < 0.0 || eps >= 1.0) {
    throw std::invalid_argument("cross_entropy: smoothing must be in [0,1)");
  }
  if (V < 2) throw std::invalid_argument("cross_entropy: vocab too small");

  std::size_t n_active = 0;
  for (auto m : pad_mask) n_active += m ? 1 : 0;
  if (n_active == 0) throw std::invalid_argument("cross_entropy: all positions are masked (empty batch)");

  const real smooth_denom = static_cast<real>(V - 1);  // non-pad vocabulary
  const real* pl = logits.value().data();

  // Row-wise stable log-softmax, accumulated into the smoothed objective.
  auto log_probs = std::make_shared<std::vector<real>>(logits.numel());
  real loss = 0.0;
  for (int m = 0; m < M; ++m) {
    const real* row = pl + static_cast<std::size_t>(m) * V;
    real* lp = log_probs->data() + static_cast<std::size_t>(m) * V;
    real mx = row[0];
    for (int v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    real sum = 0.0;
    for (int v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
    const real lse = mx + std::log(sum);
    for (int v = 0; v < V; ++v) lp[v] = row[v] - lse;
    if (!pad_mask[static_cast<std::size_t>(m)]) continue;
    const int t = targets[static_cast<std::size_t>(m)];
    if (t < 0 || t >= V) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) + " outside vocab of " +
                              std::to_string(V));
    }
    real smooth_nll = 0.0;
    for (int v = 0; v < V; ++v) {
      if (v == pad_id) continue;
      smooth_nll -= lp[v];
    }
    loss += (1.0 - eps) * (-lp[t]) + eps * smooth_nll / smooth_denom;
  }
  loss /= static_cast<real>(n_active);

  const bool rg = track_grad(logits);
  Tensor out({1}, std::vector<real>{loss}, rg);
  if (rg) {
    auto ln = logits.node(), on = out.node();
    auto targets_copy = std::make_shared<std::vector<int>>(targets);
    auto mask_copy = std::make_shared<std::vector<std::uint8_t>>(pad_mask);
    Tape::active()->record(on, [ln, on, log_probs, targets_copy, mask_copy, M, V, eps, pad_id,
                                smooth_denom, n_active]() {
      if (!ln->requires_grad) return;
      real* gl = grad_of(ln.get()).data();
      const real g = on->grad[0] / static_cast<real>(n_active);
      for (int m = 0; m < M; ++m) {
        if (!(*mask_copy)[static_cast<std::size_t>(m)]) continue;
        const real* lp = log_probs->data() + static_cast<std::size_t>(m) * V;
        real* gr = gl + static_cast<std::size_t>(m) * V;
        const int t = (*targets_copy)[static_cast<std::size_t>(m)];
        for (int v = 0; v < V; ++v) {
          real q = 0.0;
          if (v == t) q += 1.0 - eps;
          if (v != pad_id) q += eps / smooth_denom;
          gr[v] += g * (std::exp(lp[v]) - q);
        }
      }
    });
  }
  return out;
}

double kl_uniform(const std::vector<real>& a_row) {
  const double h = static_cast<double>(a_row.size());
  double kl = 0.0;
  for (real a : a_row) {
    if (a > 0.0) kl += static_cast<double>(a) * std::log(static_cast<double>(a) * h);
  }
  return kl;
}

Tensor kl_to_uniform_rows(const Tensor& a) {
  if (a.ndim() != 2) {
    throw std::invalid_argument("kl_to_uniform_rows: expected [positions, heads], got " +
                                shape_str(a.shape()));
  }
  const int M = a.dim(0);
  const int H = a.dim(1);
  const real hf = static_cast<real>(H);
  const bool rg = track_grad(a);
  Tensor out = Tensor::zeros({M}, rg);
  const real* pa = a.value().data();
  real* po = out.value().data();
  for (int m = 0; m < M; ++m) {
    real kl = 0.0;
    for (int h = 0; h < H; ++h) {
      const real v = pa[static_cast<std::size_t>(m) * H + h];
      if (v > 0.0) kl += v * std::log(v * hf);
    }
    po[m] = kl;
  }
  if (rg) {
    auto an = a.node(), on = out.node();
    Tape::active()->record(on, [an, on, M, H, hf]() {
      if (!an->requires_grad) return;
      real* ga = grad_of(an.get()).data();
      const real* g = on->grad.data();
      const real* pa2 = an->value.data();
      for (int m = 0; m < M; ++m) {
        for (int h = 0; h < H; ++h) {
          const std::size_t off = static_cast<std::size_t>(m) * H + h;
          if (pa2[off] > 0.0) ga[off] += g[m] * (std::log(pa2[off] * hf) + 1.0);
        }
      }
    });
  }
  return out;
}

Tensor aggregate_kl(const std::vector<ImportanceRecord>& records,
                    std::map<std::string, double>* per_site) {
  if (records.empty()) throw std::invalid_argument("aggregate_kl: no importance records");
  Tensor acc;
  int used = 0;
  for (const auto& rec : records) {
    const int M = rec.a.dim(0);
    if (static_cast<int>(rec.query_pad.size()) != M) {
      throw std::invalid_argument("aggregate_kl: record pad mask does not match positions");
    }
    std::size_t active = 0;
    Tensor maskf({M});
    for (int m = 0; m < M; ++m) {
      const real keep = rec.query_pad[static_cast<std::size_t>(m)] ? 1.0 : 0.0;
      maskf.at(m) = keep;
      active += keep != 0.0 ? 1 : 0;
    }
    if (active == 0) continue;
    Tensor site_mean =
        scale(sum_all(mul(kl_to_uniform_rows(rec.a), maskf)), 1.0 / static_cast<real>(active));
    if (per_site) (*per_site)[to_string(rec.site)] = site_mean.item();
    acc = acc.defined() ? add(acc, site_mean) : site_mean;
    ++used;
  }
  if (used == 0) throw std::invalid_argument("aggregate_kl: zero unmasked positions across records");
  return scale(acc, 1.0 / static_cast<real>(used));
}

Tensor total_loss(const Tensor& l_c, const Tensor& l_kl, real lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  return sub(l_c, scale(l_kl, lambda));
}

}  // namespace dhicm
