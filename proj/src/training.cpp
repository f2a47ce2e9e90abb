#include "dhicm/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dhicm/checkpoint.hpp"
#include "dhicm/decoding.hpp"

namespace dhicm {

real lr_schedule(std::int64_t step, real base_lr, std::int64_t warmup) {
  if (step < 1) throw std::invalid_argument("lr_schedule: step must be >= 1");
  if (warmup < 1) throw std::invalid_argument("lr_schedule: warmup must be >= 1");
  const real s = static_cast<real>(step);
  const real w = static_cast<real>(warmup);
  return base_lr * std::min(s / w, std::sqrt(w / s));
}

void AdamOptimizer::step(std::vector<std::pair<std::string, Tensor>>& params, real lr) {
  ++t_;
  const real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<real>(t_));
  const real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<real>(t_));
  for (auto& [name, p] : params) {
    auto& mom = moments_[name];
    if (mom.m.empty()) {
      mom.m.assign(p.numel(), 0.0);
      mom.v.assign(p.numel(), 0.0);
    }
    const bool has_grad = p.has_grad();
    const real* g = has_grad ? p.grad().data() : nullptr;
    real* w = p.value().data();
    const std::size_t n = p.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const real gi = g ? g[i] : 0.0;
      if (!std::isfinite(gi)) {
        throw std::runtime_error("adam: non-finite gradient in parameter '" + name + "'");
      }
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * gi;
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const real mhat = mom.m[i] / bc1;
      const real vhat = mom.v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double global_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (real g : p.node()->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  std::map<std::string, std::string> kv;
  std::ostringstream lr;
  lr.precision(17);
  lr << base_lr;
  kv["base_lr"] = lr.str();
  kv["warmup"] = std::to_string(warmup);
  kv["auto_shrink_warmup"] = auto_shrink_warmup ? "1" : "0";
  std::ostringstream cn;
  cn.precision(17);
  cn << clip_norm;
  kv["clip_norm"] = cn.str();
  kv["max_epochs"] = std::to_string(max_epochs);
  kv["patience"] = std::to_string(patience);
  kv["max_tokens"] = std::to_string(max_tokens);
  std::ostringstream b1, b2, ae;
  b1.precision(17);
  b2.precision(17);
  ae.precision(17);
  b1 << adam.beta1;
  b2 << adam.beta2;
  ae << adam.eps;
  kv["adam_beta1"] = b1.str();
  kv["adam_beta2"] = b2.str();
  kv["adam_eps"] = ae.str();
  kv["valid_bleu"] = valid_bleu ? "1" : "0";
  kv["keep_every_epoch"] = std::to_string(keep_every_epoch);
  return kv;
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig tc;
  auto get_or = [&kv](const char* key, const std::string& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
  };
  try {
    tc.base_lr = static_cast<real>(std::stod(get_or("base_lr", "5e-4")));
    tc.warmup = std::stoi(get_or("warmup", "4000"));
    tc.auto_shrink_warmup = get_or("auto_shrink_warmup", "1") != "0";
    tc.clip_norm = static_cast<real>(std::stod(get_or("clip_norm", "1.0")));
    tc.max_epochs = std::stoi(get_or("max_epochs", "30"));
    tc.patience = std::stoi(get_or("patience", "10"));
    tc.max_tokens = std::stoi(get_or("max_tokens", "1024"));
    tc.adam.beta1 = static_cast<real>(std::stod(get_or("adam_beta1", "0.9")));
    tc.adam.beta2 = static_cast<real>(std::stod(get_or("adam_beta2", "0.98")));
    tc.adam.eps = static_cast<real>(std::stod(get_or("adam_eps", "1e-6")));
    tc.valid_bleu = get_or("valid_bleu", "0") != "0";
    tc.keep_every_epoch = std::stoi(get_or("keep_every_epoch", "0"));
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("train config: bad value (") + e.what() + ")");
  }
  if (tc.base_lr <= 0 || tc.warmup < 1 || tc.max_epochs < 0 || tc.patience < 1 || tc.max_tokens < 4) {
    throw std::invalid_argument("train config: out-of-range value");
  }
  return tc;
}

EvalMetrics evaluate_teacher_forced(const Model& model, const std::vector<Batch>& batches,
                                    const PruneSpec* prune) {
  EvalMetrics metrics;
  double lc_sum = 0.0, kl_sum = 0.0;
  std::size_t tokens = 0, correct = 0;
  std::size_t kl_batches = 0;
  std::map<std::string, double> site_sums;
  for (const auto& batch : batches) {
    ForwardOptions opts;
    opts.training = false;
    opts.prune = prune;
    ForwardResult fwd = model.forward(batch, opts);
    const std::size_t batch_tokens = batch.target_tokens();
    Tensor lc = cross_entropy_label_smoothed(fwd.logits, batch.tgt_out, batch.tgt_pad,
                                             model.config().label_smoothing, Vocab::pad_id);
    lc_sum += lc.item() * static_cast<double>(batch_tokens);
    if (!fwd.records.empty()) {
      std::map<std::string, double> per_site;
      Tensor lkl = aggregate_kl(fwd.records, &per_site);
      kl_sum += lkl.item();
      for (const auto& [site, v] : per_site) site_sums[site] += v;
      ++kl_batches;
    }
    const int V = fwd.logits.dim(1);
    const real* pl = fwd.logits.value().data();
    for (std::size_t i = 0; i < batch.tgt_out.size(); ++i) {
      if (!batch.tgt_pad[i]) continue;
      const real* row = pl + i * static_cast<std::size_t>(V);
      int best = 0;
      for (int v = 1; v < V; ++v) {
        if (row[v] > row[best]) best = v;
      }
      correct += best == batch.tgt_out[i] ? 1 : 0;
      ++tokens;
    }
  }
  if (tokens == 0) throw std::invalid_argument("evaluate: no unmasked target tokens");
  metrics.l_c = lc_sum / static_cast<double>(tokens);
  metrics.l_kl = kl_batches ? kl_sum / static_cast<double>(kl_batches) : 0.0;
  metrics.token_accuracy = static_cast<double>(correct) / static_cast<double>(tokens);
  for (const auto& [site, v] : site_sums) {
    metrics.per_site_kl[site] = kl_batches ? v / static_cast<double>(kl_batches) : 0.0;
  }
  return metrics;
}

TrainResult train(Model& model, const ParallelCorpus& train_corpus,
                  const ParallelCorpus& valid_corpus, const TrainConfig& tc,
                  const std::string& out_dir, bool resume) {
  if (train_corpus.pairs.empty() || valid_corpus.pairs.empty()) {
    throw std::invalid_argument("train: empty train or valid corpus");
  }
  std::filesystem::create_directories(out_dir);
  const std::string best_path = out_dir + "/checkpoint_best.bin";
  const std::string last_path = out_dir + "/checkpoint_last.bin";
  const std::string log_path = out_dir + "/train_log.jsonl";

  std::vector<Batch> train_batches = batchify(train_corpus, tc.max_tokens);
  std::vector<Batch> valid_batches = batchify(valid_corpus, tc.max_tokens);

  const std::int64_t planned_steps =
      static_cast<std::int64_t>(tc.max_epochs) * static_cast<std::int64_t>(train_batches.size());
  std::int64_t warmup = tc.warmup;
  if (tc.auto_shrink_warmup && planned_steps < 20000) {
    warmup = std::max<std::int64_t>(1, tc.warmup / 10);
  }

  TrainState state;
  state.rng_seed = model.config().seed;
  AdamOptimizer optimizer(tc.adam);
  if (resume) {
    LoadedCheckpoint loaded = load_checkpoint(last_path);
    if (!loaded.state) throw std::runtime_error("resume: " + last_path + " has no training state");
    // Copy restored weights into the live model.
    auto& dst = model.parameters();
    const auto& src = loaded.model.parameters();
    if (dst.size() != src.size()) throw std::runtime_error("resume: model layout mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i].second.value() = src[i].second.value();
    state = *loaded.state;
    if (loaded.optimizer) optimizer = std::move(*loaded.optimizer);
  } else {
    save_checkpoint(last_path, model, &state, &optimizer);
    save_checkpoint(best_path, model, &state, &optimizer);
  }

  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("train: cannot write " + log_path);
  log.precision(17);

  Rng root(model.config().seed);
  TrainResult result;
  result.best_checkpoint = best_path;
  result.last_checkpoint = last_path;
  result.log_path = log_path;
  result.best_valid_lc = state.best_valid;

  const real eps_smooth = model.config().label_smoothing;
  const real lambda = model.config().lambda;

  for (int epoch = state.epoch + 1; epoch <= tc.max_epochs; ++epoch) {
    auto order = root.split("shuffle", static_cast<std::uint64_t>(epoch))
                     .permutation(train_batches.size());
    bool diverged = false;
    for (std::size_t bi = 0; bi < order.size(); ++bi) {
      const Batch& batch = train_batches[order[bi]];
      const std::int64_t step = state.step + 1;
      Rng step_rng = root.split("step", static_cast<std::uint64_t>(step));

      Tape tape;
      ForwardOptions opts;
      opts.training = true;
      opts.rng = &step_rng;
      ForwardResult fwd = model.forward(batch, opts);
      Tensor l_c = cross_entropy_label_smoothed(fwd.logits, batch.tgt_out, batch.tgt_pad, eps_smooth,
                                                Vocab::pad_id);
      LossBreakdown breakdown;
      breakdown.l_c = l_c.item();
      Tensor total;
      if (!fwd.records.empty()) {
        Tensor l_kl = aggregate_kl(fwd.records, &breakdown.per_site_kl);
        breakdown.l_kl = l_kl.item();
        total = total_loss(l_c, l_kl, lambda);
      } else {
        total = l_c;
      }
      breakdown.total = total.item();

      if (!std::isfinite(breakdown.total)) {
        log << nlohmann::ordered_json({{"event", "diverged"}, {"step", step}, {"epoch", epoch}}).dump()
            << "\n";
        diverged = true;
        break;
      }

      tape.backward(total);
      double grad_norm = global_grad_norm(model.parameters());
      if (tc.clip_norm > 0 && grad_norm > tc.clip_norm) {
        const real factor = static_cast<real>(tc.clip_norm / grad_norm);
        for (auto& [name, p] : model.parameters()) {
          if (!p.has_grad()) continue;
          for (real& g : p.node()->grad) g *= factor;
        }
      }
      const real lr = lr_schedule(step, tc.base_lr, warmup);
      optimizer.step(model.parameters(), lr);
      model.zero_grad();
      state.step = step;

      nlohmann::ordered_json rec;
      rec["step"] = step;
      rec["epoch"] = epoch;
      rec["L_c"] = breakdown.l_c;
      rec["L_KL"] = breakdown.l_kl;
      rec["total"] = breakdown.total;
      rec["lr"] = lr;
      rec["grad_norm"] = grad_norm;
      log << rec.dump() << "\n";
    }

    if (diverged) {
      // Leave the previously saved checkpoints untouched.
      result.diverged = true;
      result.epochs_run = epoch - 1;
      result.steps = state.step;
      result.best_valid_lc = state.best_valid;
      log.flush();
      return result;
    }

    EvalMetrics valid = evaluate_teacher_forced(model, valid_batches);
    double bleu = -1.0;
    if (tc.valid_bleu) {
      std::vector<std::vector<int>> hyps, refs;
      for (const auto& [src, tgt] : valid_corpus.pairs) {
        hyps.push_back(greedy_decode(model, src, model.config().max_len));
        refs.push_back(tgt);
      }
      bleu = corpus_bleu(hyps, refs);
    }

    state.epoch = epoch;
    const bool improved = valid.l_c < state.best_valid;
    if (improved) {
      state.best_valid = valid.l_c;
      state.epochs_no_improve = 0;
    } else {
      ++state.epochs_no_improve;
    }
    save_checkpoint(last_path, model, &state, &optimizer);
    if (improved) save_checkpoint(best_path, model, &state, &optimizer);
    if (tc.keep_every_epoch > 0 && epoch % tc.keep_every_epoch == 0) {
      save_checkpoint(out_dir + "/checkpoint_epoch" + std::to_string(epoch) + ".bin", model, &state,
                      &optimizer);
    }

    nlohmann::ordered_json rec;
    rec["epoch"] = epoch;
    rec["valid_L_c"] = valid.l_c;
    rec["valid_L_KL"] = valid.l_kl;
    if (bleu >= 0) {
      rec["bleu"] = bleu;
    } else {
      rec["bleu"] = nullptr;
    }
    rec["best_so_far"] = state.best_valid;
    log << rec.dump() << "\n";

    result.epochs_run = epoch;
    result.steps = state.step;
    result.best_valid_lc = state.best_valid;
    if (state.epochs_no_improve >= tc.patience) {
      result.early_stopped = true;
      break;
    }
  }
  log.flush();
  return result;
}

}  // namespace dhicm
