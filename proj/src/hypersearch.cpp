#include "dhicm/hypersearch.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace dhicm {

void GridSpec::validate(int d) const {
  if (ffn_dims.empty() || head_counts.empty() || dropouts.empty() || attention_dropouts.empty() ||
      activation_dropouts.empty() || dhicm_dropouts.empty() || label_smoothings.empty()) {
    throw std::invalid_argument("grid: every value list must be non-empty");
  }
  for (int h : head_counts) {
    if (h <= 0 || d % h != 0) {
      throw std::invalid_argument("grid: head count " + std::to_string(h) + " does not divide d=" +
                                  std::to_string(d));
    }
  }
  const std::size_t need = phase1_count() + phase2_count();
  if (static_cast<std::size_t>(budget) < need) {
    throw std::invalid_argument("grid: budget " + std::to_string(budget) + " below required " +
                                std::to_string(need) + " trials");
  }
  if (trial_max_epochs < 1) throw std::invalid_argument("grid: trial_max_epochs must be >= 1");
}

GridSpec GridSpec::desk_default() {
  GridSpec g;
  g.ffn_dims = {64, 128, 256};
  g.head_counts = {2, 4, 8};
  g.dropouts = {0.0, 0.1, 0.3, 0.5};
  g.attention_dropouts = {0.0, 0.1};
  g.activation_dropouts = {0.0, 0.3};
  g.dhicm_dropouts = {0.0, 0.2};
  g.label_smoothings = {0.1, 0.4};
  return g;
}

GridSpec GridSpec::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("grid: cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  GridSpec g;
  g.ffn_dims = j.at("phase1").at("ffn_dim").get<std::vector<int>>();
  g.head_counts = j.at("phase1").at("heads").get<std::vector<int>>();
  const auto& p2 = j.at("phase2");
  g.dropouts = p2.at("dropout").get<std::vector<real>>();
  g.attention_dropouts = p2.at("attention_dropout").get<std::vector<real>>();
  g.activation_dropouts = p2.at("activation_dropout").get<std::vector<real>>();
  g.dhicm_dropouts = p2.at("dhicm_dropout").get<std::vector<real>>();
  g.label_smoothings = p2.at("label_smoothing").get<std::vector<real>>();
  g.budget = j.value("budget", 1000);
  g.trial_max_epochs = j.value("trial_max_epochs", 30);
  g.seed = j.value("seed", 1ull);
  return g;
}

void GridSpec::save(const std::string& path) const {
  nlohmann::ordered_json j;
  j["phase1"] = {{"ffn_dim", ffn_dims}, {"heads", head_counts}};
  j["phase2"] = {{"dropout", dropouts},
                 {"attention_dropout", attention_dropouts},
                 {"activation_dropout", activation_dropouts},
                 {"dhicm_dropout", dhicm_dropouts},
                 {"label_smoothing", label_smoothings}};
  j["budget"] = budget;
  j["trial_max_epochs"] = trial_max_epochs;
  j["seed"] = seed;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("grid: cannot write " + path);
  f << j.dump(2) << "\n";
}

namespace {

std::string trial_csv_row(const TrialRecord& rec) {
  std::ostringstream os;
  os.precision(17);
  const auto& c = rec.config;
  os << rec.trial_id << "," << rec.phase << "," << c.ffn_dim << "," << c.heads << "," << c.dropout
     << "," << c.attention_dropout << "," << c.activation_dropout << "," << c.dhicm_dropout << ","
     << c.label_smoothing << "," << rec.result.valid_l_c << "," << rec.result.valid_bleu << ","
     << rec.result.epochs_run << "," << rec.result.status;
  return os.str();
}

constexpr const char* kCsvHeader =
    "trial_id,phase,ffn_dim,heads,dropout,attention_dropout,activation_dropout,dhicm_dropout,"
    "label_smoothing,valid_L_c,valid_BLEU,epochs_run,status";

// Completed trials from a previous run, keyed by trial id.
std::map<std::string, TrialResult> read_completed(const std::string& path) {
  std::map<std::string, TrialResult> done;
  std::ifstream f(path);
  if (!f) return done;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream is(line);
    std::string cell;
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (cells.size() != 13) continue;
    TrialResult r;
    r.valid_l_c = std::stod(cells[9]);
    r.valid_bleu = std::stod(cells[10]);
    r.epochs_run = std::stoi(cells[11]);
    r.status = cells[12];
    done[cells[0]] = r;
  }
  return done;
}

void run_phase(std::vector<TrialRecord>& trials, const TrialRunner& runner,
               std::map<std::string, TrialResult>& completed, std::ofstream& csv, std::mutex& mu,
               int workers) {
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    auto it = completed.find(trials[i].trial_id);
    if (it != completed.end()) {
      trials[i].result = it->second;
    } else {
      pending.push_back(i);
    }
  }
  if (pending.empty()) return;

  std::size_t cursor = 0;
  auto worker = [&]() {
    for (;;) {
      std::size_t idx;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (cursor >= pending.size()) return;
        idx = pending[cursor++];
      }
      TrialRecord& rec = trials[idx];
      TrialResult result;
      try {
        result = runner(rec.trial_id, rec.config);
      } catch (const std::exception&) {
        result.status = "failed";
        result.valid_l_c = std::numeric_limits<double>::infinity();
      }
      {
        std::lock_guard<std::mutex> lock(mu);
        rec.result = result;
        completed[rec.trial_id] = result;
        csv << trial_csv_row(rec) << "\n";
        csv.flush();
      }
    }
  };

  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    const int n = std::min<int>(workers, static_cast<int>(pending.size()));
    pool.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
}

}  // namespace

GridSearchResult grid_search(const ModelConfig& base, const GridSpec& spec, const TrialRunner& runner,
                             const std::string& out_dir, int workers) {
  spec.validate(base.d);
  std::filesystem::create_directories(out_dir);
  const std::string table_path = out_dir + "/gridsearch.csv";

  auto completed = read_completed(table_path);
  const bool fresh = completed.empty();
  std::ofstream csv(table_path, fresh ? std::ios::trunc : std::ios::app);
  if (!csv) throw std::runtime_error("grid: cannot write " + table_path);
  if (fresh) {
    csv << kCsvHeader << "\n";
    csv.flush();
  }

  std::mutex mu;
  GridSearchResult result;
  result.table_path = table_path;

  // Phase 1: architecture values, regularization pinned at the base config.
  std::vector<TrialRecord> phase1;
  {
    int i = 0;
    for (int ffn : spec.ffn_dims) {
      for (int heads : spec.head_counts) {
        TrialRecord rec;
        std::ostringstream id;
        id << "p1-" << std::setw(3) << std::setfill('0') << i++;
        rec.trial_id = id.str();
        rec.phase = 1;
        rec.config = base;
        rec.config.ffn_dim = ffn;
        rec.config.heads = heads;
        rec.config.seed = Rng(spec.seed).split("trial", fnv1a64(rec.trial_id)).seed();
        phase1.push_back(std::move(rec));
      }
    }
  }
  run_phase(phase1, runner, completed, csv, mu, workers);

  const TrialRecord* arch_best = nullptr;
  for (const auto& rec : phase1) {
    if (!arch_best || rec.result.valid_l_c < arch_best->result.valid_l_c) arch_best = &rec;
  }
  if (!arch_best || !std::isfinite(arch_best->result.valid_l_c)) {
    throw std::runtime_error("grid: every phase-1 trial failed");
  }

  // Phase 2: regularization values at the winning architecture.
  std::vector<TrialRecord> phase2;
  {
    int i = 0;
    for (real drop : spec.dropouts) {
      for (real attn_drop : spec.attention_dropouts) {
        for (real act_drop : spec.activation_dropouts) {
          for (real dhicm_drop : spec.dhicm_dropouts) {
            for (real ls : spec.label_smoothings) {
              TrialRecord rec;
              std::ostringstream id;
              id << "p2-" << std::setw(3) << std::setfill('0') << i++;
              rec.trial_id = id.str();
              rec.phase = 2;
              rec.config = arch_best->config;
              rec.config.dropout = drop;
              rec.config.attention_dropout = attn_drop;
              rec.config.activation_dropout = act_drop;
              rec.config.dhicm_dropout = dhicm_drop;
              rec.config.label_smoothing = ls;
              rec.config.seed = Rng(spec.seed).split("trial", fnv1a64(rec.trial_id)).seed();
              phase2.push_back(std::move(rec));
            }
          }
        }
      }
    }
  }
  run_phase(phase2, runner, completed, csv, mu, workers);

  const TrialRecord* best = nullptr;
  for (const auto& rec : phase2) {
    if (!best || rec.result.valid_l_c < best->result.valid_l_c) best = &rec;
  }
  if (!best || !std::isfinite(best->result.valid_l_c)) {
    throw std::runtime_error("grid: every phase-2 trial failed");
  }

  result.best_config = best->config;
  result.best_valid_l_c = best->result.valid_l_c;
  result.trials = std::move(phase1);
  result.trials.insert(result.trials.end(), phase2.begin(), phase2.end());
  return result;
}

TrialRunner make_training_runner(const ParallelCorpus& train_corpus,
                                 const ParallelCorpus& valid_corpus, TrainConfig tc,
                                 const std::string& work_dir) {
  return [&train_corpus, &valid_corpus, tc, work_dir](const std::string& trial_id,
                                                      const ModelConfig& cfg) {
    Model model(cfg);
    const std::string dir = work_dir + "/" + trial_id;
    TrainResult tr = train(model, train_corpus, valid_corpus, tc, dir);
    TrialResult result;
    result.valid_l_c = tr.best_valid_lc;
    result.epochs_run = tr.epochs_run;
    result.status = tr.diverged ? "failed" : "ok";
    if (tr.diverged) result.valid_l_c = std::numeric_limits<double>::infinity();
    return result;
  };
}

}  // namespace dhicm
