// Copyright 2026 The M2H Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "m2h/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "m2h/common.hpp"

namespace m2h {

void ModelConfig::finalize() {
  if (taps.empty()) {
    taps.resize(kNumScales);
    for (int i = 1; i <= kNumScales; ++i) {
      // even spread over depth; duplicates appear when enc_blocks < 4
      taps[i - 1] = std::max(1, (i * enc_blocks + kNumScales - 1) / kNumScales);
    }
  }
  validate();
}

void ModelConfig::validate() const {
  M2H_CHECK_CFG(patch >= 1, "patch size must be positive");
  M2H_CHECK_CFG(img_h % patch == 0 && img_w % patch == 0, "image dims ", img_h, "x", img_w,
                " not divisible by patch ", patch);
  M2H_CHECK_CFG(img_h % 4 == 0 && img_w % 4 == 0, "image dims must be divisible by 4");
  M2H_CHECK_CFG(token_grid_h() % 2 == 0 && token_grid_w() % 2 == 0,
                "token grid ", token_grid_h(), "x", token_grid_w(),
                " must be even so the coarsest pyramid level halves exactly");
  M2H_CHECK_CFG(emb_d >= 1 && channels >= 1, "emb_d and channels must be positive");
  M2H_CHECK_CFG(enc_blocks >= 1, "need at least one encoder block");
  M2H_CHECK_CFG(emb_d % enc_heads == 0, "emb_d ", emb_d, " not divisible by enc_heads ",
                enc_heads);
  M2H_CHECK_CFG(channels % wmca_heads == 0, "channels ", channels,
                " not divisible by wmca_heads ", wmca_heads);
  M2H_CHECK_CFG(window >= 1, "window must be >= 1");
  M2H_CHECK_CFG(wmca_layers >= 0, "wmca_layers must be >= 0");
  M2H_CHECK_CFG(num_classes >= 2, "need at least two semantic classes");
  M2H_CHECK_CFG(max_depth > 0, "max_depth must be positive");
  M2H_CHECK_CFG(se_reduction >= 1 && channels % se_reduction == 0, "channels ", channels,
                " not divisible by se_reduction ", se_reduction);
  M2H_CHECK_CFG(static_cast<int>(taps.size()) == kNumScales, "expected ", kNumScales,
                " tap indices, got ", taps.size());
  for (size_t i = 0; i < taps.size(); ++i) {
    M2H_CHECK_CFG(taps[i] >= 1 && taps[i] <= enc_blocks, "tap index ", taps[i],
                  " out of range [1, ", enc_blocks, "]");
    // non-decreasing; strictness is impossible when enc_blocks < 4
    if (i > 0)
      M2H_CHECK_CFG(taps[i] >= taps[i - 1], "tap indices must be non-decreasing");
  }
}

void LossConfig::validate() const {
  M2H_CHECK_CFG(alpha_initial >= 0 && beta_initial >= 0 && alpha_finetune >= 0 &&
                    beta_finetune >= 0,
                "segmentation mix weights must be non-negative");
  M2H_CHECK_CFG(huber_delta > 0, "huber delta must be positive");
  M2H_CHECK_CFG(lambda_grad >= 0.5 && lambda_grad <= 2.0, "lambda_grad ", lambda_grad,
                " outside [0.5, 2]");
  M2H_CHECK_CFG(consistency_weight >= 0, "consistency weight must be non-negative");
  M2H_CHECK_CFG(dwa_temperature > 0, "DWA temperature must be positive");
}

void RunConfig::validate() const {
  ModelConfig m = model;
  m.finalize();
  loss.validate();
  M2H_CHECK_CFG(lr > 0, "learning rate must be positive");
  M2H_CHECK_CFG(steps >= 1 && batch_size >= 1, "steps and batch size must be positive");
  M2H_CHECK_CFG(resolved_initial_steps() <= steps, "initial_steps exceeds total steps");
  M2H_CHECK_CFG(poly_power > 0, "poly power must be positive");
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

std::string int_list_str(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  raise<ConfigError>("bad boolean value '", v, "'");
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::map<std::string, std::function<void(const std::string&)>> setters;
  auto set_int = [&](const char* key, int& target) {
    setters[key] = [&target](const std::string& v) { target = std::stoi(v); };
  };
  auto set_double = [&](const char* key, double& target) {
    setters[key] = [&target](const std::string& v) { target = std::stod(v); };
  };
  auto set_bool = [&](const char* key, bool& target) {
    setters[key] = [&target](const std::string& v) { target = parse_bool(v); };
  };
  auto set_string = [&](const char* key, std::string& target) {
    setters[key] = [&target](const std::string& v) { target = v; };
  };

  ModelConfig& m = cfg.model;
  set_int("img_h", m.img_h);
  set_int("img_w", m.img_w);
  set_int("patch", m.patch);
  set_int("emb_d", m.emb_d);
  set_int("enc_blocks", m.enc_blocks);
  set_int("enc_heads", m.enc_heads);
  setters["taps"] = [&m](const std::string& v) { m.taps = parse_int_list(v); };
  set_int("channels", m.channels);
  set_int("window", m.window);
  set_int("wmca_layers", m.wmca_layers);
  set_int("wmca_heads", m.wmca_heads);
  set_int("ffn_expansion", m.ffn_expansion);
  set_int("head_channels", m.head_channels);
  set_int("num_classes", m.num_classes);
  set_double("max_depth", m.max_depth);
  set_int("se_reduction", m.se_reduction);
  set_bool("depthwise_refine", m.depthwise_refine);
  set_bool("wmca_out_proj", m.wmca_out_proj);
  set_bool("wmca_mask_padding", m.wmca_mask_padding);
  set_bool("use_wmca", m.use_wmca);
  set_bool("use_ggfm", m.use_ggfm);

  LossConfig& l = cfg.loss;
  set_double("alpha_initial", l.alpha_initial);
  set_double("beta_initial", l.beta_initial);
  set_double("alpha_finetune", l.alpha_finetune);
  set_double("beta_finetune", l.beta_finetune);
  set_double("huber_delta", l.huber_delta);
  set_double("lambda_grad", l.lambda_grad);
  set_bool("outdoor", l.outdoor);
  set_double("consistency_weight", l.consistency_weight);
  set_double("dwa_temperature", l.dwa_temperature);
  set_double("dice_eps", l.dice_eps);
  set_bool("edge_auto_pos_weight", l.edge_auto_pos_weight);
  set_double("edge_pos_weight_cap", l.edge_pos_weight_cap);
  set_bool("dwa_ema", l.dwa_ema);
  set_double("dwa_ema_beta", l.dwa_ema_beta);

  set_double("lr", cfg.lr);
  set_double("weight_decay", cfg.weight_decay);
  set_double("beta1", cfg.beta1);
  set_double("beta2", cfg.beta2);
  set_double("adam_eps", cfg.adam_eps);
  set_double("poly_power", cfg.poly_power);
  set_int("steps", cfg.steps);
  set_int("batch_size", cfg.batch_size);
  set_int("initial_steps", cfg.initial_steps);
  set_int("checkpoint_every", cfg.checkpoint_every);
  set_int("log_every", cfg.log_every);
  setters["seed"] = [&cfg](const std::string& v) { cfg.seed = std::stoull(v); };
  set_string("data_dir", cfg.data_dir);
  set_string("out_dir", cfg.out_dir);

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      raise<ConfigError>("config line ", lineno, ": expected key = value, got '", line, "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) raise<ConfigError>("unknown config key '", key, "'");
    try {
      it->second(value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      raise<ConfigError>("config key '", key, "': bad value '", value, "' (", e.what(), ")");
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise<IoError>("cannot open config file '", path, "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os.precision(17);
  const ModelConfig& m = model;
  os << "img_h = " << m.img_h << "\n";
  os << "img_w = " << m.img_w << "\n";
  os << "patch = " << m.patch << "\n";
  os << "emb_d = " << m.emb_d << "\n";
  os << "enc_blocks = " << m.enc_blocks << "\n";
  os << "enc_heads = " << m.enc_heads << "\n";
  if (!m.taps.empty()) os << "taps = " << int_list_str(m.taps) << "\n";
  os << "channels = " << m.channels << "\n";
  os << "window = " << m.window << "\n";
  os << "wmca_layers = " << m.wmca_layers << "\n";
  os << "wmca_heads = " << m.wmca_heads << "\n";
  os << "ffn_expansion = " << m.ffn_expansion << "\n";
  os << "head_channels = " << m.head_channels << "\n";
  os << "num_classes = " << m.num_classes << "\n";
  os << "max_depth = " << m.max_depth << "\n";
  os << "se_reduction = " << m.se_reduction << "\n";
  os << "depthwise_refine = " << (m.depthwise_refine ? 1 : 0) << "\n";
  os << "wmca_out_proj = " << (m.wmca_out_proj ? 1 : 0) << "\n";
  os << "wmca_mask_padding = " << (m.wmca_mask_padding ? 1 : 0) << "\n";
  os << "use_wmca = " << (m.use_wmca ? 1 : 0) << "\n";
  os << "use_ggfm = " << (m.use_ggfm ? 1 : 0) << "\n";
  const LossConfig& l = loss;
  os << "alpha_initial = " << l.alpha_initial << "\n";
  os << "beta_initial = " << l.beta_initial << "\n";
  os << "alpha_finetune = " << l.alpha_finetune << "\n";
  os << "beta_finetune = " << l.beta_finetune << "\n";
  os << "huber_delta = " << l.huber_delta << "\n";
  os << "lambda_grad = " << l.lambda_grad << "\n";
  os << "outdoor = " << (l.outdoor ? 1 : 0) << "\n";
  os << "consistency_weight = " << l.consistency_weight << "\n";
  os << "dwa_temperature = " << l.dwa_temperature << "\n";
  os << "dice_eps = " << l.dice_eps << "\n";
  os << "edge_auto_pos_weight = " << (l.edge_auto_pos_weight ? 1 : 0) << "\n";
  os << "edge_pos_weight_cap = " << l.edge_pos_weight_cap << "\n";
  os << "dwa_ema = " << (l.dwa_ema ? 1 : 0) << "\n";
  os << "dwa_ema_beta = " << l.dwa_ema_beta << "\n";
  os << "lr = " << lr << "\n";
  os << "weight_decay = " << weight_decay << "\n";
  os << "beta1 = " << beta1 << "\n";
  os << "beta2 = " << beta2 << "\n";
  os << "adam_eps = " << adam_eps << "\n";
  os << "poly_power = " << poly_power << "\n";
  os << "steps = " << steps << "\n";
  os << "batch_size = " << batch_size << "\n";
  os << "initial_steps = " << initial_steps << "\n";
  os << "checkpoint_every = " << checkpoint_every << "\n";
  os << "log_every = " << log_every << "\n";
  os << "seed = " << seed << "\n";
  if (!data_dir.empty()) os << "data_dir = " << data_dir << "\n";
  if (!out_dir.empty()) os << "out_dir = " << out_dir << "\n";
  return os.str();
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) raise<IoError>("cannot write config file '", path, "'");
  out << serialize();
}

}  // namespace m2h
