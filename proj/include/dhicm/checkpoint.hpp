#pragma once

#include <optional>
#include <string>

#include "dhicm/model.hpp"
#include "dhicm/training.hpp"

namespace dhicm {

// Checkpoint file: magic + JSON manifest (config, tensor directory, train
// state) followed by raw little-endian tensor blobs in directory order, with
// Adam moments appended when optimizer state is included. Round-trips are
// bit-exact.
void save_checkpoint(const std::string& path, const Model& model, const TrainState* state = nullptr,
                     const AdamOptimizer* optimizer = nullptr);

struct LoadedCheckpoint {
  Model model;
  std::optional<TrainState> state;
  std::optional<AdamOptimizer> optimizer;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace dhicm
