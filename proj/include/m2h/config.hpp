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

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace m2h {

// Architectural hyperparameters. Defaults follow the reference configuration
// (patch 16, emb 384, C = 256, window 7, two WMCA layers with four heads); the
// small variant swaps C = 64 and depthwise refinement convolutions.
struct ModelConfig {
  int img_h = 224;
  int img_w = 224;
  int patch = 16;
  int emb_d = 384;
  int enc_blocks = 4;  // desk-scale default; the reference backbone uses 12
  int enc_heads = 4;
  std::vector<int> taps;  // K=4 one-based block indices; empty derives them evenly
  int channels = 256;     // C
  int window = 7;         // p
  int wmca_layers = 2;
  int wmca_heads = 4;
  int ffn_expansion = 4;
  int head_channels = 0;  // 0 = channels / 2
  int num_classes = 40;
  double max_depth = 10.0;
  int se_reduction = 4;
  bool depthwise_refine = false;  // small-variant style MSF refinement convs
  bool wmca_out_proj = true;
  bool wmca_mask_padding = false;
  bool use_wmca = true;
  bool use_ggfm = true;

  static constexpr int kNumScales = 4;  // K
  static constexpr int kNumTasks = 4;   // e, n, s, d

  int token_grid_h() const { return img_h / patch; }
  int token_grid_w() const { return img_w / patch; }
  int num_tokens() const { return token_grid_h() * token_grid_w(); }
  int feat_h() const { return img_h / 4; }  // H' = H/4 for patch 16
  int feat_w() const { return img_w / 4; }
  int head_ch() const { return head_channels > 0 ? head_channels : channels / 2; }

  // Fills taps evenly over the encoder depth when unset, then validates.
  void finalize();
  void validate() const;
};

struct LossConfig {
  double alpha_initial = 0.5;
  double beta_initial = 0.75;
  double alpha_finetune = 0.75;
  double beta_finetune = 1.0;
  double huber_delta = 1.0;
  double lambda_grad = 1.0;  // paper guidance keeps this in [0.5, 2]
  bool outdoor = false;
  double consistency_weight = 0.1;
  double dwa_temperature = 2.0;
  double dice_eps = 1.0;
  bool edge_auto_pos_weight = true;
  double edge_pos_weight_cap = 20.0;
  bool dwa_ema = false;
  double dwa_ema_beta = 0.9;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;

  double lr = 5e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double poly_power = 0.9;
  int steps = 2000;
  int batch_size = 2;
  int initial_steps = -1;  // -1 = 80% of steps
  int checkpoint_every = 500;
  int log_every = 1;
  uint64_t seed = 0;
  std::string data_dir;
  std::string out_dir;

  int resolved_initial_steps() const {
    return initial_steps >= 0 ? initial_steps : (steps * 4) / 5;
  }

  void validate() const;

  // Flat key = value text format ('#' starts a comment). Unknown keys are
  // rejected so typos fail loudly.
  static RunConfig load(const std::string& path);
  static RunConfig parse(const std::string& text);
  std::string serialize() const;
  void save(const std::string& path) const;
};

}  // namespace m2h
