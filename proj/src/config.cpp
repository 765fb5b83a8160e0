#include "mambaseg/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>

#include "mambaseg/errors.hpp"

namespace mambaseg::config {
namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* expected) {
  throw ConfigError("config: key '" + key + "' expects " + expected +
                    ", got '" + value + "'");
}

long parse_long(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(value, &used);
  } catch (const std::exception&) {
    bad_value(key, value, "an integer");
  }
  if (used != value.size()) bad_value(key, value, "an integer");
  return v;
}

float parse_float(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  float v = 0.0f;
  try {
    v = std::stof(value, &used);
  } catch (const std::exception&) {
    bad_value(key, value, "a number");
  }
  if (used != value.size()) bad_value(key, value, "a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "true/false");
}

unsigned parse_seed(const std::string& key, const std::string& value) {
  long v = parse_long(key, value);
  if (v < 0) bad_value(key, value, "a non-negative integer");
  return static_cast<unsigned>(v);
}

void apply_model(models::ModelConfig& m, const std::string& key,
                 const std::string& value) {
  if (key == "kind") {
    m.kind = models::model_kind_from_string(value);
  } else if (key == "n_classes") {
    m.n_classes = parse_long(key, value);
  } else if (key == "d_enc") {
    m.d_enc = parse_long(key, value);
  } else if (key == "enc_blocks") {
    m.enc_blocks = parse_long(key, value);
  } else if (key == "enc_heads") {
    m.enc_heads = parse_long(key, value);
  } else if (key == "patch") {
    m.patch = parse_long(key, value);
  } else if (key == "mlp_ratio") {
    m.mlp_ratio = parse_long(key, value);
  } else if (key == "proj_width") {
    m.proj_width = parse_long(key, value);
  } else if (key == "d_mamba") {
    m.d_mamba = parse_long(key, value);
  } else if (key == "stem_patch") {
    m.stem_patch = parse_long(key, value);
  } else if (key == "stage_blocks") {
    m.stage_blocks = parse_long(key, value);
  } else if (key == "lora_rank") {
    m.lora_rank = parse_long(key, value);
  } else if (key == "cba_heads") {
    m.cba_heads = parse_long(key, value);
  } else if (key == "cba_d_head") {
    m.cba_d_head = parse_long(key, value);
  } else if (key == "n_state") {
    m.n_state = parse_long(key, value);
  } else if (key == "expand") {
    m.expand = parse_long(key, value);
  } else if (key == "d_conv") {
    m.d_conv = parse_long(key, value);
  } else if (key == "method") {
    if (value == "zoh") {
      m.method = ops::Discretization::zoh;
    } else if (value == "bilinear") {
      m.method = ops::Discretization::bilinear;
    } else {
      bad_value(key, value, "zoh or bilinear");
    }
  } else if (key == "d_adapter") {
    m.d_adapter = parse_long(key, value);
  } else if (key == "freq_set") {
    if (value == "full") {
      m.freq_set = mfgc::FreqSet::full;
    } else if (value == "low2") {
      m.freq_set = mfgc::FreqSet::low2;
    } else {
      bad_value(key, value, "full or low2");
    }
  } else if (key == "img") {
    m.img = parse_long(key, value);
  } else if (key == "in_d") {
    m.in_d = parse_long(key, value);
  } else if (key == "seed") {
    m.seed = parse_seed(key, value);
  } else {
    throw ConfigError("config: unknown key '" + key + "' in [model]");
  }
}

void apply_train(optim::TrainConfig& t, const std::string& key,
                 const std::string& value) {
  if (key == "base_lr") {
    t.base_lr = parse_float(key, value);
  } else if (key == "warmup_steps") {
    t.warmup_steps = parse_long(key, value);
  } else if (key == "clip_norm") {
    t.clip_norm = parse_float(key, value);
  } else if (key == "batch") {
    t.batch = parse_long(key, value);
  } else if (key == "weight_decay") {
    t.weight_decay = parse_float(key, value);
  } else if (key == "seed") {
    t.seed = parse_seed(key, value);
  } else {
    throw ConfigError("config: unknown key '" + key + "' in [train]");
  }
}

void apply_data(RunConfig::Data& d, const std::string& key,
                const std::string& value) {
  if (key == "train_phantoms") {
    d.train_phantoms = parse_long(key, value);
  } else if (key == "train_patches") {
    d.train_patches = parse_long(key, value);
  } else if (key == "eval_phantoms") {
    d.eval_phantoms = parse_long(key, value);
  } else if (key == "phantom_d") {
    d.phantom_d = parse_long(key, value);
  } else if (key == "phantom_h") {
    d.phantom_h = parse_long(key, value);
  } else if (key == "phantom_w") {
    d.phantom_w = parse_long(key, value);
  } else if (key == "spacing") {
    d.spacing = parse_float(key, value);
  } else if (key == "augment") {
    d.augment = parse_bool(key, value);
  } else if (key == "seed") {
    d.seed = parse_seed(key, value);
  } else if (key == "dir") {
    d.dir = value;
  } else {
    throw ConfigError("config: unknown key '" + key + "' in [data]");
  }
}

void apply_run(RunConfig::Run& r, const std::string& key,
               const std::string& value) {
  if (key == "epochs") {
    r.epochs = parse_long(key, value);
  } else if (key == "eval_every") {
    r.eval_every = parse_long(key, value);
  } else if (key == "checkpoint") {
    r.checkpoint = value;
  } else if (key == "metrics_csv") {
    r.metrics_csv = value;
  } else {
    throw ConfigError("config: unknown key '" + key + "' in [run]");
  }
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section = "model";  // keys before any header default to [model]
  long lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": unterminated section header '" + line + "'");
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "train" && section != "data" &&
          section != "run") {
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": unknown section [" + section + "]");
      }
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value, got '" + line + "'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key");
    }
    if (section == "model") {
      apply_model(cfg.model, key, value);
    } else if (section == "train") {
      apply_train(cfg.trainer, key, value);
    } else if (section == "data") {
      apply_data(cfg.data, key, value);
    } else {
      apply_run(cfg.run, key, value);
    }
  }
  models::validate(cfg.model);
  if (cfg.data.train_phantoms < 1 || cfg.data.train_patches < 1 ||
      cfg.data.eval_phantoms < 0) {
    throw ConfigError("config: [data] counts must be positive");
  }
  if (cfg.run.epochs < 1 || cfg.run.eval_every < 1) {
    throw ConfigError("config: [run] epochs and eval_every must be >= 1");
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("config not found: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace mambaseg::config
