#pragma once

#include <cstdint>
#include <memory>

#include "mvd/backbone.hpp"
#include "mvd/dataset.hpp"
#include "mvd/optim.hpp"
#include "mvd/tokenizer.hpp"

namespace mvd::distill {

// Frozen target generators. At least one must be present; a present teacher
// whose lambda is zero is simply never run.
struct TeacherBundle {
  const model::TransformerModel* image_teacher = nullptr;
  const model::TransformerModel* video_teacher = nullptr;
};

enum class TargetNorm { none, layernorm };

struct DistillConfig {
  double lambda_img = 1.0;
  double lambda_vid = 1.0;
  double mask_ratio = 0.9;
  double smooth_l1_beta = 1.0;
  bool pixel_branch = false;
  TargetNorm target_norm = TargetNorm::none;
  int epochs = 100;
  int batch_size = 32;
  double base_lr = 1.5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double warmup_fraction = 0.025;
  std::uint64_t seed = 0;
};

void validate_distill_config(const DistillConfig& cfg, const TeacherBundle& teachers);

// Teacher forward on the full unmasked sequence; returns plain values with no
// graph attached. clip must already be normalized.
nn::Mat video_teacher_targets(const data::ClipArray& clip, const model::TransformerModel& h_vid);

// For 3D token (tau,i,j) the target is the teacher feature of 2D patch (i,j)
// on the front frame tau*pt of that temporal patch; frames are encoded
// independently as full images.
nn::Mat image_teacher_targets(const data::ClipArray& clip, const model::TransformerModel& h_img,
                              const tok::TokenLayout& video_layout);

// Optional per-token standardization of a target matrix (non-affine).
void apply_target_norm(nn::Mat& targets, TargetNorm norm, double eps = 1e-6);

// Mean over masked tokens of the per-token mean smooth-L1 distance.
nn::Var smooth_l1_feature_loss(const nn::Var& y, const nn::Mat& targets,
                               const std::vector<int>& mask_rows, double beta);

struct DistillBatchItem {
  const nn::Mat* tokens = nullptr;         // full token grid
  const nn::Mat* img_targets = nullptr;    // required when lambda_img > 0
  const nn::Mat* vid_targets = nullptr;    // required when lambda_vid > 0
  const nn::Mat* pixel_targets = nullptr;  // required when pixel_branch
  tok::TubeMask mask;
};

// One decoder per active target stream; inactive streams have no decoder at
// all, so runs with a branch disabled are step-for-step identical to runs
// where that branch never existed.
struct StudentDecoders {
  std::unique_ptr<model::DecoderModel> img, vid, pix;
};

StudentDecoders init_student_decoders(const model::ModelConfig& student_cfg,
                                      const TeacherBundle& teachers, const DistillConfig& cfg,
                                      std::uint64_t seed);

struct LossParts {
  nn::Var total;              // lambda_img*img + lambda_vid*vid + pixel
  nn::Var img, vid, pixel;    // null when the branch is inactive
};

LossParts mvd_loss(const model::TransformerModel& student, const StudentDecoders& decoders,
                   const std::vector<DistillBatchItem>& batch, const DistillConfig& cfg);

struct DistillOutcome {
  double total = 0.0, img = 0.0, vid = 0.0, pixel = 0.0;
  bool has_img = false, has_vid = false, has_pixel = false;
};

// Builds the batch loss, backpropagates, applies one optimizer step, and
// clears gradients.
DistillOutcome mvd_step(model::TransformerModel& student, StudentDecoders& decoders,
                        std::vector<train::NamedParam>& params, train::AdamW& opt, double lr,
                        const std::vector<DistillBatchItem>& batch, const DistillConfig& cfg);

struct DistillResult {
  model::TransformerModel student;
  train::TrainLog log;
};

DistillResult distill(const model::ModelConfig& student_cfg, const TeacherBundle& teachers,
                      const data::LabeledVideoSet& corpus, const DistillConfig& cfg);

// Unmasked baseline: the student encodes every token and an MLP projects its
// features onto the teacher's before a smooth-L1 match at all positions.
DistillResult per_token_distill(const model::ModelConfig& student_cfg,
                                const model::TransformerModel& teacher,
                                const data::LabeledVideoSet& corpus, const DistillConfig& cfg);

// Self-teaching baseline: targets come from an EMA copy of the student,
// updated after every optimizer step; the copy never receives gradients.
DistillResult ema_teacher_distill(const model::ModelConfig& student_cfg,
                                  const data::LabeledVideoSet& corpus, const DistillConfig& cfg,
                                  double momentum);

}  // namespace mvd::distill
