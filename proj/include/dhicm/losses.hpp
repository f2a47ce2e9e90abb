#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dhicm/attention.hpp"
#include "dhicm/tensor.hpp"

namespace dhicm {

// Scalar view of one step's objective for logging. total = l_c - lambda*l_kl.
struct LossBreakdown {
  double l_c = 0.0;
  double l_kl = 0.0;
  double total = 0.0;
  std::map<std::string, double> per_site_kl;
};

// Label-smoothed cross entropy, averaged over unmasked positions. The
// smoothing mass `eps` is spread uniformly over the non-pad vocabulary:
//   loss_row = (1-eps) * nll(target) + eps * mean_{v != pad} nll(v).
// eps = 0 reduces to plain cross entropy. Throws if every position is masked.
Tensor cross_entropy_label_smoothed(const Tensor& logits, const std::vector<int>& targets,
                                    const std::vector<std::uint8_t>& pad_mask, real eps,
                                    int pad_id = 0);

// KL divergence from a head-importance row to the uniform distribution:
// ln H - entropy(a). Zero entries contribute zero (their limit value).
double kl_uniform(const std::vector<real>& a_row);

// Per-row KL-to-uniform of an importance matrix [M,H] -> [M]; differentiable.
Tensor kl_to_uniform_rows(const Tensor& a);

// Mean KL over unmasked positions within each record, then mean over records.
// Per-site means (by site name) are written to *per_site when given.
// Throws if no record has an unmasked position.
Tensor aggregate_kl(const std::vector<ImportanceRecord>& records,
                    std::map<std::string, double>* per_site = nullptr);

// Combined objective l_c - lambda * l_kl.
Tensor total_loss(const Tensor& l_c, const Tensor& l_kl, real lambda);

}  // namespace dhicm
