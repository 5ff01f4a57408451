#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mvd::cli {

// Sectioned key=value settings with typed fields and a closed schema: any key
// outside the tables below is rejected. Optional fields resolve per command
// (image vs video mask ratio, lambdas from the teacher set, class counts per
// task).
struct RunConfig {
  // [data]
  std::string data_task = "spatial";
  int data_n_train = 96;
  int data_n_val = 48;
  std::uint64_t data_seed = 0;
  int data_t = 8, data_h = 32, data_w = 32, data_c = 1;
  std::optional<int> data_class_count;
  int data_jitter_px = 1;

  // [model]
  int model_embed_dim = 64;
  int model_depth = 4;
  int model_heads = 4;
  int model_mlp_ratio = 4;
  int model_decoder_dim = 32;
  int model_decoder_depth = 2;
  int model_pt = 2;
  int model_ps = 8;

  // [stage1]
  std::optional<double> stage1_mask_ratio;  // default 0.75 image, 0.9 video
  int stage1_epochs = 30;
  int stage1_batch_size = 16;
  double stage1_base_lr = 1.5e-4;
  double stage1_weight_decay = 0.05;
  double stage1_beta1 = 0.9;
  double stage1_beta2 = 0.95;
  double stage1_warmup_fraction = 0.025;
  bool stage1_normalize_targets = true;
  std::uint64_t stage1_seed = 0;

  // [stage2]
  std::optional<double> stage2_lambda_img;  // default 1 when the teacher is given
  std::optional<double> stage2_lambda_vid;
  double stage2_mask_ratio = 0.9;
  double stage2_smooth_l1_beta = 1.0;
  bool stage2_pixel_branch = false;
  std::string stage2_target_norm = "none";  // none|layernorm
  int stage2_epochs = 40;
  int stage2_batch_size = 16;
  double stage2_base_lr = 1.5e-4;
  double stage2_weight_decay = 0.05;
  double stage2_beta1 = 0.9;
  double stage2_beta2 = 0.95;
  double stage2_warmup_fraction = 0.025;
  double stage2_momentum = 0.99;  // EMA baseline only
  std::uint64_t stage2_seed = 0;

  // [eval]
  int eval_epochs = 20;
  int eval_batch_size = 16;
  double eval_base_lr = 1e-3;
  double eval_weight_decay = 0.05;
  double eval_beta1 = 0.9;
  double eval_beta2 = 0.95;
  double eval_warmup_fraction = 0.1;
  bool eval_linear_probe = false;
  std::uint64_t eval_seed = 0;

  // Sets one "section.key" to a parsed value; throws std::invalid_argument
  // for unknown keys or unparseable values.
  void set(const std::string& dotted_key, const std::string& value);

  // Resolved snapshot as config-file text; unresolved optionals are omitted.
  std::string to_ini() const;
};

RunConfig parse_config_file(const std::string& path);
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin);

// "section.key=value" items from --set flags.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets);

}  // namespace mvd::cli
