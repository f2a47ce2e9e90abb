#include "dhicm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace dhicm {

namespace {

constexpr char kMagic[8] = {'D', 'H', 'C', 'K', '0', '1', '\n', '\0'};

void write_blob(std::ofstream& f, const std::vector<real>& data) {
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(real)));
}

void read_blob(std::ifstream& f, std::vector<real>& data) {
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(real)));
  if (!f) throw std::runtime_error("checkpoint: truncated tensor data");
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const TrainState* state,
                     const AdamOptimizer* optimizer) {
  nlohmann::ordered_json header;
  header["format"] = "dhicm-checkpoint";
  header["version"] = 1;
  header["real_bits"] = static_cast<int>(sizeof(real) * 8);
  header["config"] = model.config().to_map();

  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  for (const auto& [name, tensor] : model.parameters()) {
    params.push_back({{"name", name}, {"shape", tensor.shape()}});
  }
  header["params"] = std::move(params);

  if (state) {
    header["train_state"] = {{"step", state->step},
                             {"epoch", state->epoch},
                             {"best_valid", state->best_valid},
                             {"epochs_no_improve", state->epochs_no_improve},
                             {"rng_seed", state->rng_seed}};
  }
  header["has_optimizer"] = optimizer != nullptr;
  if (optimizer) {
    header["adam"] = {{"beta1", optimizer->config().beta1},
                      {"beta2", optimizer->config().beta2},
                      {"eps", optimizer->config().eps},
                      {"step_count", optimizer->step_count()}};
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + tmp);
    f.write(kMagic, sizeof(kMagic));
    const std::string json_text = header.dump();
    const std::uint64_t len = json_text.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(json_text.data(), static_cast<std::streamsize>(json_text.size()));
    for (const auto& [name, tensor] : model.parameters()) write_blob(f, tensor.value());
    if (optimizer) {
      for (const auto& [name, tensor] : model.parameters()) {
        auto it = optimizer->moments().find(name);
        if (it != optimizer->moments().end()) {
          write_blob(f, it->second.m);
          write_blob(f, it->second.v);
        } else {
          const std::vector<real> zeros(tensor.numel(), 0.0);
          write_blob(f, zeros);
          write_blob(f, zeros);
        }
      }
    }
    if (!f) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("checkpoint: cannot move " + tmp + " to " + path);
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot read " + path);
  char magic[sizeof(kMagic)];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
  }
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string json_text(len, '\0');
  f.read(json_text.data(), static_cast<std::streamsize>(len));
  if (!f) throw std::runtime_error("checkpoint: truncated header in " + path);

  nlohmann::json header = nlohmann::json::parse(json_text);
  if (header.value("real_bits", 0) != static_cast<int>(sizeof(real) * 8)) {
    throw std::runtime_error("checkpoint: precision mismatch (file has " +
                             std::to_string(header.value("real_bits", 0)) + "-bit reals, build uses " +
                             std::to_string(sizeof(real) * 8) + "-bit)");
  }

  std::map<std::string, std::string> cfg_map = header.at("config");
  ModelConfig cfg = ModelConfig::from_map(cfg_map);
  LoadedCheckpoint loaded{Model(cfg), std::nullopt, std::nullopt};

  // Tensor directory must match the freshly built model exactly.
  const auto& params = loaded.model.parameters();
  const auto& dir = header.at("params");
  if (dir.size() != params.size()) {
    throw std::runtime_error("checkpoint: parameter directory size mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = dir[i].at("name");
    const std::vector<int> shape = dir[i].at("shape");
    if (name != params[i].first || shape != params[i].second.shape()) {
      throw std::runtime_error("checkpoint: parameter '" + name + "' does not match model layout");
    }
  }
  for (auto& [name, tensor] : loaded.model.parameters()) read_blob(f, tensor.value());

  if (header.contains("train_state")) {
    TrainState st;
    const auto& ts = header["train_state"];
    st.step = ts.at("step");
    st.epoch = ts.at("epoch");
    st.best_valid = ts.at("best_valid");
    st.epochs_no_improve = ts.at("epochs_no_improve");
    st.rng_seed = ts.at("rng_seed");
    loaded.state = st;
  }
  if (header.value("has_optimizer", false)) {
    AdamConfig acfg;
    acfg.beta1 = header["adam"].at("beta1");
    acfg.beta2 = header["adam"].at("beta2");
    acfg.eps = header["adam"].at("eps");
    AdamOptimizer opt(acfg);
    opt.set_step_count(header["adam"].at("step_count"));
    for (const auto& [name, tensor] : loaded.model.parameters()) {
      AdamOptimizer::Moments mom;
      mom.m.assign(tensor.numel(), 0.0);
      mom.v.assign(tensor.numel(), 0.0);
      read_blob(f, mom.m);
      read_blob(f, mom.v);
      opt.moments()[name] = std::move(mom);
    }
    loaded.optimizer = std::move(opt);
  }
  return loaded;
}

}  // namespace dhicm
