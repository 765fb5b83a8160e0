#pragma once

#include <string>

#include "mambaseg/models.hpp"
#include "mambaseg/optim.hpp"

namespace mambaseg::config {

/// Everything one command run needs, parsed from a sectioned key=value file.
/// Every field has a usable default, so a one-line config is enough.
struct RunConfig {
  models::ModelConfig model;  // [model]
  optim::TrainConfig trainer;  // [train]

  struct Data {  // [data]
    long train_phantoms = 25;   // generated training volumes
    long train_patches = 200;   // label-aware crops sampled from them
    long eval_phantoms = 32;    // held-out volumes at model input size
    long phantom_d = 20, phantom_h = 80, phantom_w = 80;
    float spacing = 1.5f;       // isotropic voxel spacing (mm)
    bool augment = true;        // random in-plane flips/quarter-turns
    unsigned seed = 7;
    std::string dir;            // nonempty: read volumes instead of generating
  } data;

  struct Run {  // [run]
    long epochs = 12;
    long eval_every = 4;
    std::string checkpoint = "mambaseg.ckpt";
    std::string metrics_csv;  // optional CSV output path for `eval`
  } run;
};

/// Strict parser: unknown sections or keys and malformed values all raise
/// ConfigError. '#' starts a comment; blank lines are ignored.
RunConfig parse_config_text(const std::string& text);

/// Reads and parses a config file; a missing file raises ConfigError.
RunConfig load_config(const std::string& path);

}  // namespace mambaseg::config
