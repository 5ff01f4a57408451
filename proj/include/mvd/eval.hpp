#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvd/backbone.hpp"
#include "mvd/dataset.hpp"

namespace mvd::eval {

struct FinetuneConfig {
  int epochs = 20;
  int batch_size = 32;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double warmup_fraction = 0.1;
  bool linear_probe = false;  // train the head only, encoder stays fixed
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  nn::Mat head_weight;  // embed_dim x class_count
  nn::Mat head_bias;    // 1 x class_count
  double top1 = 0.0;    // val accuracy
};

// Mean-pooled full-sequence features -> linear head, trained jointly with the
// encoder unless linear_probe. The caller's encoder is never mutated.
FinetuneResult finetune(const model::TransformerModel& encoder,
                        const data::LabeledVideoSet& train_set,
                        const data::LabeledVideoSet& val_set, const FinetuneConfig& cfg);

struct SimilarityMatrix {
  nn::Mat m;  // square, symmetric, unit diagonal
};

// Cosine similarity between frame-level feature vectors of one clip. Video
// models yield a t_tokens-sized matrix (mean over spatial tokens per time
// index); image models encode each frame independently for a T-sized matrix.
// The clip must already be normalized.
SimilarityMatrix frame_similarity(const model::TransformerModel& model,
                                  const data::ClipArray& clip);

struct AggregateSimilarity {
  SimilarityMatrix mean;
  double off_diagonal_mean = 0.0;
};

AggregateSimilarity aggregate_similarity(const model::TransformerModel& model,
                                         const data::LabeledVideoSet& set);

struct ModelEntry {
  std::string tag;
  const model::TransformerModel* model;
};

struct TaskEntry {
  std::string tag;
  const data::LabeledVideoSet* train;
  const data::LabeledVideoSet* val;
};

struct EvalRow {
  std::string model_tag, task_tag;
  double top1;
};

struct EvalReport {
  std::vector<EvalRow> rows;   // model-major cross product
  std::string summary;         // per-task argmax, one line per task
};

EvalReport compare_report(const std::vector<ModelEntry>& models,
                          const std::vector<TaskEntry>& tasks, const FinetuneConfig& cfg);

// 6-decimal fixed CSV: square numeric grid, one row per frame index.
void save_similarity_csv(const SimilarityMatrix& sim, const std::string& path);
// CSV columns: model,task,top1
void save_eval_report_csv(const EvalReport& report, const std::string& path);

}  // namespace mvd::eval
