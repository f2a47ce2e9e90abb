// Command-line front end: data generation, training, evaluation, decoding,
// attention/importance dumps, head ranking, pruning experiments, gradient
// checking, two-phase grid search and size sweeps.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dhicm/analysis.hpp"
#include "dhicm/checkpoint.hpp"
#include "dhicm/config_file.hpp"
#include "dhicm/data.hpp"
#include "dhicm/decoding.hpp"
#include "dhicm/gradcheck.hpp"
#include "dhicm/hypersearch.hpp"
#include "dhicm/model.hpp"
#include "dhicm/training.hpp"

namespace fs = std::filesystem;
using namespace dhicm;

namespace {

constexpr const char* kToolVersion = "0.1.0";

// ---- shared helpers ----

std::string hash_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream os;
  os << f.rdbuf();
  const std::string bytes = os.str();
  std::ostringstream hex;
  hex << "fnv64:" << std::hex << fnv1a64(bytes.data(), bytes.size());
  return hex.str();
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  if (out.empty()) throw std::invalid_argument("expected a comma-separated integer list");
  return out;
}

struct DataDir {
  Vocab vocab;
  ParallelCorpus train, valid, test;
  std::string dir;
  std::string train_name;
};

// Loads vocab.txt plus train/valid/test parallel files. `size` < 0 picks the
// largest train-<n> set (or plain train.src when present).
DataDir load_data_dir(const std::string& dir, long size) {
  DataDir d;
  d.dir = dir;
  d.vocab = Vocab::load(dir + "/vocab.txt");
  std::string train_prefix;
  if (size >= 0) {
    train_prefix = dir + "/train-" + std::to_string(size);
    d.train_name = "train-" + std::to_string(size);
    if (!fs::exists(train_prefix + ".src")) {
      throw std::runtime_error("no " + train_prefix + ".src in data dir");
    }
  } else if (fs::exists(dir + "/train.src")) {
    train_prefix = dir + "/train";
    d.train_name = "train";
  } else {
    long best = -1;
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("train-", 0) == 0 && name.size() > 10 &&
          name.substr(name.size() - 4) == ".src") {
        best = std::max(best, std::stol(name.substr(6, name.size() - 10)));
      }
    }
    if (best < 0) throw std::runtime_error("no train corpus found in " + dir);
    train_prefix = dir + "/train-" + std::to_string(best);
    d.train_name = "train-" + std::to_string(best);
  }
  d.train = load_corpus(train_prefix, d.vocab, "train");
  d.valid = load_corpus(dir + "/valid", d.vocab, "valid");
  d.test = load_corpus(dir + "/test", d.vocab, "test");
  return d;
}

nlohmann::ordered_json data_manifest(const DataDir& d) {
  nlohmann::ordered_json files;
  for (const std::string& stem : {d.train_name, std::string("valid"), std::string("test")}) {
    for (const char* ext : {".src", ".tgt"}) {
      const std::string path = d.dir + "/" + stem + ext;
      if (fs::exists(path)) files[stem + ext] = hash_file(path);
    }
  }
  if (fs::exists(d.dir + "/vocab.txt")) files["vocab.txt"] = hash_file(d.dir + "/vocab.txt");
  return nlohmann::ordered_json{{"dir", d.dir}, {"files", files}};
}

void write_manifest(const std::string& path, const std::string& command,
                    const std::map<std::string, std::string>& config, std::uint64_t seed,
                    const nlohmann::ordered_json& data, const nlohmann::ordered_json& outputs) {
  nlohmann::ordered_json m;
  m["tool"] = "dhicm";
  m["version"] = kToolVersion;
  m["command"] = command;
  m["seed"] = seed;
  m["config"] = config;
  m["data"] = data;
  m["outputs"] = outputs;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << m.dump(2) << "\n";
}

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  long seed = -1;
  double lambda_override = -1.0;
  int variant = 0;  // 0 = as configured, 1 = baseline, 2 = dhicm default placement
};

std::map<std::string, std::string> resolve_config_map(const ConfigArgs& args) {
  std::map<std::string, std::string> kv;
  if (!args.config_path.empty()) kv = load_config_file(args.config_path);
  apply_overrides(kv, args.overrides);
  check_known_keys(kv);
  if (args.seed >= 0) kv["seed"] = std::to_string(args.seed);
  if (args.lambda_override >= 0) {
    std::ostringstream os;
    os.precision(17);
    os << args.lambda_override;
    kv["lambda"] = os.str();
  }
  if (args.variant == 1) kv["dhicm_placement"] = "none";
  if (args.variant == 2) kv["dhicm_placement"] = "default";
  return kv;
}

ModelConfig model_config_for_data(std::map<std::string, std::string> kv, const Vocab& vocab) {
  kv["src_vocab"] = std::to_string(vocab.size());
  kv["tgt_vocab"] = std::to_string(vocab.size());
  ModelConfig cfg = ModelConfig::from_map(kv);
  cfg.validate();
  return cfg;
}

void add_config_options(CLI::App* cmd, ConfigArgs& args, bool with_variant = true) {
  cmd->add_option("--config", args.config_path, "flat key=value config file");
  cmd->add_option("--set", args.overrides, "override config entries (key=value)")->take_all();
  cmd->add_option("--seed", args.seed, "root random seed");
  if (with_variant) {
    cmd->add_flag_callback(
        "--baseline", [&args]() { args.variant = 1; },
        "force empty placement (standard transformer)");
    cmd->add_flag_callback(
        "--dhicm", [&args]() { args.variant = 2; }, "force default last-layer placement");
    cmd->add_option("--lambda", args.lambda_override, "importance anti-uniformity loss weight");
  }
}

std::vector<int> unframed_tokens(const Hypothesis& h) {
  std::vector<int> tokens = h.tokens;
  if (!tokens.empty() && tokens.back() == Vocab::eos_id) tokens.pop_back();
  return tokens;
}

const ParallelCorpus& pick_split(const DataDir& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "valid") return data.valid;
  if (split == "test") return data.test;
  throw std::invalid_argument("unknown split '" + split + "' (train|valid|test)");
}

nlohmann::ordered_json evaluate_to_json(const Model& model, const ParallelCorpus& corpus, int beam,
                                        const PruneSpec* prune) {
  const auto batches = batchify(corpus, 1024);
  EvalMetrics tf = evaluate_teacher_forced(model, batches, prune);
  std::vector<std::vector<int>> hyps, refs;
  for (const auto& [src, tgt] : corpus.pairs) {
    Hypothesis h = beam_search(model, src, beam, model.config().max_len, 1.0, prune);
    hyps.push_back(unframed_tokens(h));
    refs.push_back(tgt);
  }
  const double bleu = corpus_bleu(hyps, refs);
  PeakAttentionStats peak =
      peak_attention(model, corpus, std::min<int>(64, static_cast<int>(corpus.pairs.size())));
  nlohmann::ordered_json j;
  j["split"] = corpus.split;
  j["L_c"] = tf.l_c;
  j["L_KL"] = tf.l_kl;
  j["token_accuracy"] = tf.token_accuracy;
  j["bleu"] = bleu;
  j["beam"] = beam;
  j["peak_attention_mean_row_max"] = peak.mean_row_max;
  j["peak_attention_overall_max"] = peak.overall_max;
  return j;
}

// ---- subcommand implementations ----

int cmd_gen_data(const std::string& task_name, const std::string& sizes_text, int vocab_size,
                 int min_len, int max_len, int valid_size, int test_size, long seed,
                 const std::string& out, bool force) {
  std::vector<int> sizes = parse_int_list(sizes_text);
  std::sort(sizes.begin(), sizes.end());
  if (fs::exists(out + "/task.json") && !force) {
    throw std::runtime_error(out + " already holds generated data (use --force to regenerate)");
  }
  fs::create_directories(out);

  TaskSpec spec;
  spec.kind = TaskSpec::parse_kind(task_name);
  spec.vocab_size = vocab_size;
  spec.min_len = min_len;
  spec.max_len = max_len;
  spec.train_size = sizes.back();
  spec.valid_size = valid_size;
  spec.test_size = test_size;
  spec.seed = static_cast<std::uint64_t>(seed);

  GeneratedTask task = gen_task(spec);
  task.vocab.save(out + "/vocab.txt");
  for (int size : sizes) {
    save_corpus(task.train.prefix(static_cast<std::size_t>(size)), task.vocab,
                out + "/train-" + std::to_string(size));
  }
  save_corpus(task.valid, task.vocab, out + "/valid");
  save_corpus(task.test, task.vocab, out + "/test");

  nlohmann::ordered_json tj;
  tj["task"] = task_name;
  tj["vocab_size"] = vocab_size;
  tj["min_len"] = min_len;
  tj["max_len"] = max_len;
  tj["sizes"] = sizes;
  tj["valid_size"] = valid_size;
  tj["test_size"] = test_size;
  tj["seed"] = seed;
  std::ofstream tf(out + "/task.json");
  tf << tj.dump(2) << "\n";

  nlohmann::ordered_json files;
  for (const auto& entry : fs::directory_iterator(out)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("manifest", 0) == 0) continue;
    files[name] = hash_file(entry.path().string());
  }
  write_manifest(out + "/manifest_gen_data.json", "gen-data", {}, static_cast<std::uint64_t>(seed),
                 nlohmann::ordered_json{{"dir", out}, {"files", files}}, {});
  std::cout << "wrote " << sizes.size() << " training set(s), valid and test under " << out << "\n";
  return 0;
}

int cmd_train(const ConfigArgs& cargs, const std::string& data_dir, long data_size,
              const std::string& out, bool resume, const std::map<std::string, std::string>& tkv) {
  DataDir data = load_data_dir(data_dir, data_size);
  auto kv = resolve_config_map(cargs);
  ModelConfig cfg = model_config_for_data(kv, data.vocab);
  TrainConfig tc = TrainConfig::from_map(tkv);

  if (fs::exists(out + "/checkpoint_last.bin") && !resume) {
    throw std::runtime_error(out + " already contains a run (use --resume or a fresh directory)");
  }
  fs::create_directories(out);
  data.vocab.save(out + "/vocab.txt");

  Model model(cfg);
  std::cout << "training " << (cfg.placement.empty() ? "baseline" : "dhicm") << " model, "
            << model.parameter_count() << " parameters, " << data.train.size() << " train pairs\n";
  TrainResult result = train(model, data.train, data.valid, tc, out, resume);

  auto full_kv = cfg.to_map();
  for (const auto& [k, v] : tc.to_map()) full_kv[k] = v;
  {
    std::ofstream cf(out + "/config.txt");
    cf << config_to_text(full_kv);
  }
  write_manifest(out + "/manifest_train.json", "train", full_kv, cfg.seed, data_manifest(data),
                 nlohmann::ordered_json{{"checkpoint_best", result.best_checkpoint},
                                        {"checkpoint_last", result.last_checkpoint},
                                        {"log", result.log_path},
                                        {"best_valid_L_c", result.best_valid_lc},
                                        {"epochs_run", result.epochs_run},
                                        {"steps", result.steps},
                                        {"early_stopped", result.early_stopped},
                                        {"diverged", result.diverged}});
  std::cout << "best valid L_c " << result.best_valid_lc << " after " << result.epochs_run
            << " epoch(s), " << result.steps << " step(s)"
            << (result.early_stopped ? " [early stop]" : "") << "\n";
  if (result.diverged) {
    std::cerr << "training diverged; last good checkpoint preserved\n";
    return 2;
  }
  return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& data_dir, const std::string& split,
                 int beam, const std::string& out_path) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  DataDir data = load_data_dir(data_dir, -1);
  const ParallelCorpus& corpus = pick_split(data, split);
  nlohmann::ordered_json j = evaluate_to_json(loaded.model, corpus, beam, nullptr);
  j["checkpoint"] = ckpt;
  std::cout << j.dump(2) << "\n";
  std::string path = out_path;
  if (path.empty()) path = fs::path(ckpt).parent_path().string() + "/eval_" + split + ".json";
  std::ofstream f(path);
  f << j.dump(2) << "\n";
  write_manifest(path + ".manifest.json", "evaluate", loaded.model.config().to_map(),
                 loaded.model.config().seed, data_manifest(data),
                 nlohmann::ordered_json{{"metrics", path}});
  return 0;
}

int cmd_decode(const std::string& ckpt, const std::string& input, int beam, double alpha,
               const std::string& out_path, const std::string& vocab_path) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  std::string vp = vocab_path;
  if (vp.empty()) vp = fs::path(ckpt).parent_path().string() + "/vocab.txt";
  Vocab vocab = Vocab::load(vp);

  std::ifstream in(input);
  if (!in) throw std::runtime_error("cannot read " + input);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    std::istringstream is(line);
    std::vector<std::string> tokens;
    std::string tok;
    while (is >> tok) tokens.push_back(tok);
    if (tokens.empty()) {
      out << "\n";
      continue;
    }
    Hypothesis h =
        beam_search(loaded.model, vocab.encode(tokens), beam, loaded.model.config().max_len, alpha);
    const auto words = vocab.decode(unframed_tokens(h));
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) out << ' ';
      out << words[i];
    }
    out << "\n";
    ++n;
  }
  write_manifest(out_path + ".manifest.json", "decode", loaded.model.config().to_map(),
                 loaded.model.config().seed,
                 nlohmann::ordered_json{{"input", input}, {"hash", hash_file(input)}},
                 nlohmann::ordered_json{{"hypotheses", out_path}, {"sentences", n}});
  std::cout << "decoded " << n << " sentence(s) -> " << out_path << "\n";
  return 0;
}

int cmd_dump_attention(const std::string& ckpt, const std::string& data_dir,
                       const std::string& split, int sentence_id, const std::string& site_text,
                       const std::string& out_csv) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  DataDir data = load_data_dir(data_dir, -1);
  const ParallelCorpus& corpus = pick_split(data, split);
  if (sentence_id < 0 || static_cast<std::size_t>(sentence_id) >= corpus.pairs.size()) {
    throw std::invalid_argument("sentence-id " + std::to_string(sentence_id) + " outside " +
                                std::to_string(corpus.pairs.size()) + " sentences");
  }
  const auto& [src, tgt] = corpus.pairs[static_cast<std::size_t>(sentence_id)];

  AttentionDump dump;
  if (site_text.rfind("encdec:", 0) == 0) {
    // encdec:<layer>:<head|avg> selects raw encoder-decoder attention.
    const auto rest = site_text.substr(7);
    const auto colon = rest.find(':');
    const int layer = std::stoi(rest.substr(0, colon));
    const std::string head_text = colon == std::string::npos ? "avg" : rest.substr(colon + 1);
    const int head = head_text == "avg" ? -1 : std::stoi(head_text);
    dump = dump_encdec_attention(loaded.model, data.vocab, src, tgt, layer, head);
  } else {
    dump = dump_head_importance(loaded.model, data.vocab, src, tgt, parse_site(site_text));
  }
  const std::string sentence_desc = split + "[" + std::to_string(sentence_id) + "]";
  write_dump_csv(dump, out_csv, ckpt, sentence_desc);
  write_manifest(out_csv + ".manifest.json", "dump-attention", loaded.model.config().to_map(),
                 loaded.model.config().seed, data_manifest(data),
                 nlohmann::ordered_json{{"csv", out_csv}, {"site", site_text}});
  std::cout << "wrote " << dump.matrix.size() << "x" << dump.col_labels.size() << " dump to "
            << out_csv << "\n";
  return 0;
}

int cmd_rank_heads(const std::string& ckpt, const std::string& data_dir, const std::string& split,
                   const std::string& site_text, int max_sentences, const std::string& out_path) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  DataDir data = load_data_dir(data_dir, -1);
  const ParallelCorpus& corpus = pick_split(data, split);
  const SiteId site = parse_site(site_text);
  HeadRanking ranking = rank_heads_over_corpus(loaded.model, corpus, site, max_sentences);

  nlohmann::ordered_json j;
  j["site"] = site_text;
  j["order"] = ranking.order;
  j["mean_importance"] = ranking.mean_importance;
  std::cout << j.dump(2) << "\n";
  std::string path = out_path;
  if (path.empty()) path = fs::path(ckpt).parent_path().string() + "/ranking_" + split + ".json";
  std::ofstream f(path);
  f << j.dump(2) << "\n";
  write_manifest(path + ".manifest.json", "rank-heads", loaded.model.config().to_map(),
                 loaded.model.config().seed, data_manifest(data),
                 nlohmann::ordered_json{{"ranking", path}});
  return 0;
}

int cmd_prune_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
                   const std::string& site_text, const std::string& heads_text, bool no_renormalize,
                   int beam, const std::string& out_path) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  DataDir data = load_data_dir(data_dir, -1);
  const ParallelCorpus& corpus = pick_split(data, split);
  PruneSpec spec;
  spec.site = parse_site(site_text);
  if (!heads_text.empty()) spec.heads = parse_int_list(heads_text);
  spec.renormalize = !no_renormalize;
  if (static_cast<int>(spec.heads.size()) >= loaded.model.config().heads) {
    throw std::invalid_argument("cannot prune all heads");
  }
  PruneEvalResult result = prune_and_eval(loaded.model, corpus, spec, beam);

  nlohmann::ordered_json j;
  j["site"] = site_text;
  j["pruned_heads"] = result.pruned_heads;
  j["renormalize"] = spec.renormalize;
  j["split"] = split;
  j["valid_L_c"] = result.valid_l_c;
  j["bleu"] = result.bleu;
  std::cout << j.dump(2) << "\n";
  std::string path = out_path;
  if (path.empty()) path = fs::path(ckpt).parent_path().string() + "/prune_" + split + ".json";
  std::ofstream f(path);
  f << j.dump(2) << "\n";
  write_manifest(path + ".manifest.json", "prune-eval", loaded.model.config().to_map(),
                 loaded.model.config().seed, data_manifest(data),
                 nlohmann::ordered_json{{"metrics", path}});
  return 0;
}

int cmd_gradcheck(long seed, const std::string& out_dir) {
  GradCheckSuiteResult suite = run_gradcheck_suite(static_cast<std::uint64_t>(seed));
  std::cout.precision(3);
  for (const auto& r : suite.reports) {
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << "  max rel err " << std::scientific
              << r.max_rel_err;
    if (!r.pass) std::cout << "  worst at " << r.worst_param;
    std::cout << std::defaultfloat << "\n";
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : suite.reports) {
      j.push_back({{"name", r.name}, {"max_rel_err", r.max_rel_err}, {"pass", r.pass}});
    }
    std::ofstream f(out_dir + "/gradcheck.json");
    f << j.dump(2) << "\n";
    write_manifest(out_dir + "/manifest_gradcheck.json", "gradcheck", {},
                   static_cast<std::uint64_t>(seed), {},
                   nlohmann::ordered_json{{"report", out_dir + "/gradcheck.json"},
                                          {"all_pass", suite.all_pass}});
  }
  return suite.all_pass ? 0 : 3;
}

int cmd_gridsearch(const ConfigArgs& cargs, const std::string& spec_path,
                   const std::string& data_dir, long data_size, const std::string& out, int workers,
                   const std::map<std::string, std::string>& tkv) {
  DataDir data = load_data_dir(data_dir, data_size);
  auto kv = resolve_config_map(cargs);
  ModelConfig base = model_config_for_data(kv, data.vocab);
  GridSpec spec = spec_path.empty() ? GridSpec::desk_default() : GridSpec::load(spec_path);
  TrainConfig tc = TrainConfig::from_map(tkv);
  tc.max_epochs = spec.trial_max_epochs;

  fs::create_directories(out);
  TrialRunner runner = make_training_runner(data.train, data.valid, tc, out + "/trials");
  GridSearchResult result = grid_search(base, spec, runner, out, workers);

  {
    std::ofstream bc(out + "/best_config.txt");
    bc << config_to_text(result.best_config.to_map());
  }
  spec.save(out + "/gridspec.json");
  auto full_kv = base.to_map();
  for (const auto& [k, v] : tc.to_map()) full_kv[k] = v;
  write_manifest(out + "/manifest_gridsearch.json", "gridsearch", full_kv, spec.seed,
                 data_manifest(data),
                 nlohmann::ordered_json{{"table", result.table_path},
                                        {"best_config", out + "/best_config.txt"},
                                        {"best_valid_L_c", result.best_valid_l_c},
                                        {"trials", result.trials.size()}});
  std::cout << "ran " << result.trials.size() << " trial(s); best valid L_c "
            << result.best_valid_l_c << "\n";
  std::cout << "best config written to " << out << "/best_config.txt\n";
  return 0;
}

int cmd_size_sweep(const ConfigArgs& cargs, const std::string& data_dir,
                   const std::string& sizes_text, const std::string& seeds_text, int beam,
                   const std::string& out, const std::map<std::string, std::string>& tkv) {
  const std::vector<int> sizes = parse_int_list(sizes_text);
  const std::vector<int> seeds = parse_int_list(seeds_text);
  fs::create_directories(out);

  const std::string csv_path = out + "/size_sweep.csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << "size,variant,seed,test_bleu,valid_L_c,epochs_run\n";
  csv.precision(17);

  std::map<std::pair<int, std::string>, std::vector<double>> bleus;
  for (int size : sizes) {
    DataDir data = load_data_dir(data_dir, size);
    for (const std::string variant : {"baseline", "dhicm"}) {
      for (int seed : seeds) {
        ConfigArgs run_args = cargs;
        run_args.seed = seed;
        run_args.variant = variant == "baseline" ? 1 : 2;
        auto kv = resolve_config_map(run_args);
        ModelConfig cfg = model_config_for_data(kv, data.vocab);
        TrainConfig tc = TrainConfig::from_map(tkv);

        const std::string run_dir =
            out + "/size-" + std::to_string(size) + "/" + variant + "-seed" + std::to_string(seed);
        double valid_lc;
        int epochs;
        if (fs::exists(run_dir + "/checkpoint_best.bin")) {
          // completed run from a previous invocation
          LoadedCheckpoint done = load_checkpoint(run_dir + "/checkpoint_best.bin");
          valid_lc = done.state ? done.state->best_valid : 0.0;
          epochs = done.state ? done.state->epoch : 0;
        } else {
          Model model(cfg);
          TrainResult trr = train(model, data.train, data.valid, tc, run_dir);
          valid_lc = trr.best_valid_lc;
          epochs = trr.epochs_run;
        }
        LoadedCheckpoint best = load_checkpoint(run_dir + "/checkpoint_best.bin");
        std::vector<std::vector<int>> hyps, refs;
        for (const auto& [src, tgt] : data.test.pairs) {
          Hypothesis h = beam_search(best.model, src, beam, best.model.config().max_len);
          hyps.push_back(unframed_tokens(h));
          refs.push_back(tgt);
        }
        const double bleu = corpus_bleu(hyps, refs);
        csv << size << "," << variant << "," << seed << "," << bleu << "," << valid_lc << ","
            << epochs << "\n";
        csv.flush();
        bleus[{size, variant}].push_back(bleu);
        std::cout << "size " << size << " " << variant << " seed " << seed << ": test BLEU " << bleu
                  << "\n";
      }
    }
  }

  const std::string summary_path = out + "/size_sweep_summary.csv";
  std::ofstream summary(summary_path, std::ios::trunc);
  summary << "size,baseline_median_bleu,dhicm_median_bleu\n";
  summary.precision(17);
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  for (int size : sizes) {
    summary << size << "," << median(bleus[{size, "baseline"}]) << ","
            << median(bleus[{size, "dhicm"}]) << "\n";
  }
  auto kv = resolve_config_map(cargs);
  write_manifest(out + "/manifest_size_sweep.json", "size-sweep", kv,
                 static_cast<std::uint64_t>(seeds[0]),
                 nlohmann::ordered_json{{"dir", data_dir}, {"sizes", sizes}, {"seeds", seeds}},
                 nlohmann::ordered_json{{"table", csv_path}, {"summary", summary_path}});
  std::cout << "sweep table: " << csv_path << "\n";
  return 0;
}

int cmd_plot(const std::string& dump_path, const std::string& out_path, int cell_px) {
  AttentionDump dump = read_dump_csv(dump_path);
  render_heatmap(dump, out_path, cell_px);
  std::cout << "rendered " << dump.matrix.size() << "x" << dump.col_labels.size() << " heatmap to "
            << out_path << "\n";
  return 0;
}

std::map<std::string, std::string> train_kv_from(const ConfigArgs& cargs) {
  std::map<std::string, std::string> kv;
  if (!cargs.config_path.empty()) kv = load_config_file(cargs.config_path);
  apply_overrides(kv, cargs.overrides);
  check_known_keys(kv);
  return kv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale transformer with dynamic head-importance attention"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate synthetic parallel corpora");
  std::string gen_task_name = "copy", gen_sizes = "2000", gen_out = "data";
  int gen_vocab = 32, gen_min = 3, gen_max = 10, gen_valid = 200, gen_test = 200;
  long gen_seed = 1;
  bool gen_force = false;
  gen->add_option("--task", gen_task_name, "copy | reverse | lexicon")->required();
  gen->add_option("--sizes", gen_sizes, "nested training sizes, e.g. 500,1000,2000");
  gen->add_option("--vocab-size", gen_vocab, "source word types");
  gen->add_option("--min-len", gen_min, "minimum sentence length");
  gen->add_option("--max-len", gen_max, "maximum sentence length");
  gen->add_option("--valid-size", gen_valid, "validation pairs");
  gen->add_option("--test-size", gen_test, "test pairs");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_flag("--force", gen_force, "overwrite existing generated data");

  auto* tr = app.add_subcommand("train", "train a model");
  ConfigArgs tr_cfg;
  std::string tr_data, tr_out;
  long tr_size = -1;
  bool tr_resume = false;
  add_config_options(tr, tr_cfg);
  tr->add_option("--data", tr_data, "data directory from gen-data")->required();
  tr->add_option("--size", tr_size, "training subset size (train-<size>)");
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_flag("--resume", tr_resume, "continue from checkpoint_last.bin");

  auto* ev = app.add_subcommand("evaluate", "BLEU and loss of a checkpoint");
  std::string ev_ckpt, ev_data, ev_split = "valid", ev_out;
  int ev_beam = 5;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "data directory")->required();
  ev->add_option("--split", ev_split, "train | valid | test");
  ev->add_option("--beam", ev_beam, "beam size");
  ev->add_option("--out", ev_out, "metrics JSON path");

  auto* de = app.add_subcommand("decode", "translate a token file");
  std::string de_ckpt, de_input, de_out = "hypotheses.txt", de_vocab;
  int de_beam = 5;
  double de_alpha = 1.0;
  de->add_option("--ckpt", de_ckpt)->required();
  de->add_option("--input", de_input, "one source sentence per line")->required();
  de->add_option("--beam", de_beam);
  de->add_option("--alpha", de_alpha, "length penalty exponent");
  de->add_option("--out", de_out, "hypotheses file");
  de->add_option("--vocab", de_vocab, "vocab file (default: next to checkpoint)");

  auto* du = app.add_subcommand("dump-attention", "export attention or importance matrices");
  std::string du_ckpt, du_data, du_split = "test", du_site, du_out;
  int du_sentence = 0;
  du->add_option("--ckpt", du_ckpt)->required();
  du->add_option("--data", du_data)->required();
  du->add_option("--split", du_split);
  du->add_option("--sentence-id", du_sentence, "sentence index within the split");
  du->add_option("--site", du_site,
                 "importance site (e.g. encoder-self:1) or encdec:<layer>:<head|avg>")
      ->required();
  du->add_option("--out", du_out, "CSV path")->required();

  auto* rk = app.add_subcommand("rank-heads", "order heads by mean importance");
  std::string rk_ckpt, rk_data, rk_split = "valid", rk_site, rk_out;
  int rk_max = -1;
  rk->add_option("--ckpt", rk_ckpt)->required();
  rk->add_option("--data", rk_data)->required();
  rk->add_option("--split", rk_split);
  rk->add_option("--site", rk_site)->required();
  rk->add_option("--max-sentences", rk_max);
  rk->add_option("--out", rk_out, "ranking JSON path");

  auto* pr = app.add_subcommand("prune-eval", "zero heads at a site and evaluate");
  std::string pr_ckpt, pr_data, pr_split = "valid", pr_site, pr_heads, pr_out;
  int pr_beam = 5;
  bool pr_noren = false;
  pr->add_option("--ckpt", pr_ckpt)->required();
  pr->add_option("--data", pr_data)->required();
  pr->add_option("--split", pr_split);
  pr->add_option("--site", pr_site)->required();
  pr->add_option("--heads", pr_heads, "comma-separated head indices to zero");
  pr->add_flag("--no-renormalize", pr_noren, "keep surviving importances unnormalized");
  pr->add_option("--beam", pr_beam);
  pr->add_option("--out", pr_out, "metrics JSON path");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  long gc_seed = 7;
  std::string gc_out;
  gc->add_option("--seed", gc_seed);
  gc->add_option("--out", gc_out, "directory for the JSON report");

  auto* gs = app.add_subcommand("gridsearch", "two-phase hyperparameter search");
  ConfigArgs gs_cfg;
  std::string gs_spec, gs_data, gs_out;
  long gs_size = -1;
  int gs_workers = 1;
  add_config_options(gs, gs_cfg);
  gs->add_option("--spec", gs_spec, "grid spec JSON (default: desk-scale grids)");
  gs->add_option("--data", gs_data)->required();
  gs->add_option("--size", gs_size, "training subset size");
  gs->add_option("--out", gs_out)->required();
  gs->add_option("--workers", gs_workers, "parallel trials");

  auto* sw = app.add_subcommand("size-sweep", "baseline vs dhicm across training sizes");
  ConfigArgs sw_cfg;
  std::string sw_data, sw_sizes = "500,1000,2000", sw_seeds = "1,2,3", sw_out;
  int sw_beam = 5;
  add_config_options(sw, sw_cfg, /*with_variant=*/false);
  sw->add_option("--data", sw_data)->required();
  sw->add_option("--sizes", sw_sizes);
  sw->add_option("--seeds", sw_seeds);
  sw->add_option("--beam", sw_beam);
  sw->add_option("--out", sw_out)->required();

  auto* pl = app.add_subcommand("plot", "render a dump CSV as a heatmap");
  std::string pl_dump, pl_out;
  int pl_cell = 24;
  pl->add_option("--dump", pl_dump, "dump CSV from dump-attention")->required();
  pl->add_option("--out", pl_out, ".ppm image or gnuplot matrix file")->required();
  pl->add_option("--cell-px", pl_cell, "pixels per cell for .ppm output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) {
      return cmd_gen_data(gen_task_name, gen_sizes, gen_vocab, gen_min, gen_max, gen_valid,
                          gen_test, gen_seed, gen_out, gen_force);
    }
    if (tr->parsed()) {
      return cmd_train(tr_cfg, tr_data, tr_size, tr_out, tr_resume, train_kv_from(tr_cfg));
    }
    if (ev->parsed()) return cmd_evaluate(ev_ckpt, ev_data, ev_split, ev_beam, ev_out);
    if (de->parsed()) return cmd_decode(de_ckpt, de_input, de_beam, de_alpha, de_out, de_vocab);
    if (du->parsed()) {
      return cmd_dump_attention(du_ckpt, du_data, du_split, du_sentence, du_site, du_out);
    }
    if (rk->parsed()) return cmd_rank_heads(rk_ckpt, rk_data, rk_split, rk_site, rk_max, rk_out);
    if (pr->parsed()) {
      return cmd_prune_eval(pr_ckpt, pr_data, pr_split, pr_site, pr_heads, pr_noren, pr_beam,
                            pr_out);
    }
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_out);
    if (gs->parsed()) {
      return cmd_gridsearch(gs_cfg, gs_spec, gs_data, gs_size, gs_out, gs_workers,
                            train_kv_from(gs_cfg));
    }
    if (sw->parsed()) {
      return cmd_size_sweep(sw_cfg, sw_data, sw_sizes, sw_seeds, sw_beam, sw_out,
                            train_kv_from(sw_cfg));
    }
    if (pl->parsed()) return cmd_plot(pl_dump, pl_out, pl_cell);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
