#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dhicm/model.hpp"
#include "dhicm/training.hpp"

namespace dhicm {

// Two-phase grid: architecture values first (regularization pinned at the
// base config), then regularization values at the phase-1 winner. The
// sequential design costs |phase1| + |phase2| trials, never the product.
struct GridSpec {
  std::vector<int> ffn_dims;
  std::vector<int> head_counts;
  std::vector<real> dropouts;
  std::vector<real> attention_dropouts;
  std::vector<real> activation_dropouts;
  std::vector<real> dhicm_dropouts;
  std::vector<real> label_smoothings;
  int budget = 1000;           // max trials
  int trial_max_epochs = 30;   // per-trial epoch cap
  std::uint64_t seed = 1;

  std::size_t phase1_count() const { return ffn_dims.size() * head_counts.size(); }
  std::size_t phase2_count() const {
    return dropouts.size() * attention_dropouts.size() * activation_dropouts.size() *
           dhicm_dropouts.size() * label_smoothings.size();
  }
  void validate(int d) const;

  static GridSpec desk_default();
  static GridSpec load(const std::string& path);
  void save(const std::string& path) const;
};

struct TrialResult {
  double valid_l_c = std::numeric_limits<double>::infinity();
  double valid_bleu = -1.0;
  int epochs_run = 0;
  std::string status = "ok";  // ok | failed
};

struct TrialRecord {
  std::string trial_id;  // p1-000 / p2-000
  int phase = 1;
  ModelConfig config;
  TrialResult result;
};

// Runs one trial: build + train a model under the given config, return
// validation loss. Injectable so the search logic can be tested against a
// mock objective.
using TrialRunner = std::function<TrialResult(const std::string& trial_id, const ModelConfig&)>;

struct GridSearchResult {
  ModelConfig best_config;
  double best_valid_l_c = std::numeric_limits<double>::infinity();
  std::vector<TrialRecord> trials;
  std::string table_path;
};

// Executes the two-phase search. Completed trials found in
// <out_dir>/gridsearch.csv are reused (idempotent resume); per-trial rows are
// appended as they finish. `workers` > 1 runs independent trials in parallel
// within a phase. A failed trial scores +inf and the search continues.
GridSearchResult grid_search(const ModelConfig& base, const GridSpec& spec, const TrialRunner& runner,
                             const std::string& out_dir, int workers = 1);

// Default runner: trains on the given corpora with the supplied training
// settings (epoch cap from the spec applies on top).
TrialRunner make_training_runner(const ParallelCorpus& train_corpus,
                                 const ParallelCorpus& valid_corpus, TrainConfig tc,
                                 const std::string& work_dir);

}  // namespace dhicm
