#include "dhicm/config_file.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace dhicm {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " is not 'key = value': '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw std::invalid_argument("config: empty key at line " + std::to_string(lineno));
    }
    kv[key] = value;
  }
  return kv;
}

std::map<std::string, std::string> load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot read " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return parse_config_text(os.str());
}

std::string config_to_text(const std::map<std::string, std::string>& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
  return os.str();
}

void apply_overrides(std::map<std::string, std::string>& kv,
                     const std::vector<std::string>& overrides) {
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw std::invalid_argument("--set expects key=value, got '" + item + "'");
    }
    kv[trim(item.substr(0, eq))] = trim(item.substr(eq + 1));
  }
}

void check_known_keys(const std::map<std::string, std::string>& kv) {
  static const std::set<std::string> known = {
      // model
      "d", "heads", "d_m", "enc_layers", "dec_layers", "ffn_dim", "dropout", "attention_dropout",
      "activation_dropout", "dhicm_dropout", "label_smoothing", "lambda", "dhicm_placement",
      "src_vocab", "tgt_vocab", "max_len", "tie_embeddings", "seed",
      // training
      "base_lr", "warmup", "auto_shrink_warmup", "clip_norm", "max_epochs", "patience", "max_tokens",
      "adam_beta1", "adam_beta2", "adam_eps", "valid_bleu", "keep_every_epoch"};
  for (const auto& [k, v] : kv) {
    if (!known.count(k)) throw std::invalid_argument("config: unknown key '" + k + "'");
  }
}

}  // namespace dhicm
