#pragma once

#include <cstdint>

#include "mvd/backbone.hpp"
#include "mvd/dataset.hpp"
#include "mvd/optim.hpp"
#include "mvd/tokenizer.hpp"

namespace mvd::train {

struct PretrainConfig {
  double mask_ratio = 0.9;  // image runs default to 0.75 at the CLI layer
  int epochs = 50;
  int batch_size = 32;
  double base_lr = 1.5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double warmup_fraction = 0.025;
  bool normalize_targets = true;  // per-patch standardized pixel targets
  std::uint64_t seed = 0;
};

void validate_pretrain_config(const PretrainConfig& cfg);

struct PretrainResult {
  model::TransformerModel encoder;
  TrainLog log;
};

// Mean over masked tokens of the per-token MSE between predicted and target
// patch vectors. Visible positions contribute nothing.
nn::Var pixel_recon_loss(const nn::Var& y, const tok::PatchTargets& targets,
                         const std::vector<int>& mask_rows);

// Masked-pixel autoencoding of individual frames: every frame of every clip
// becomes one training image, masked by an unstructured random token subset.
PretrainResult pretrain_image_teacher(const data::LabeledVideoSet& corpus,
                                      const model::ModelConfig& mcfg, const PretrainConfig& cfg);

// Masked-pixel autoencoding of whole clips under tube masks.
PretrainResult pretrain_video_teacher(const data::LabeledVideoSet& corpus,
                                      const model::ModelConfig& mcfg, const PretrainConfig& cfg);

}  // namespace mvd::train
