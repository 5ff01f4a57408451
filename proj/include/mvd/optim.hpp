#pragma once

#include <string>
#include <vector>

#include "mvd/autograd.hpp"

namespace mvd::train {

struct NamedParam {
  std::string name;
  nn::Var var;
};

// Linear warmup to base_lr over warmup_fraction of the run, then cosine decay
// to zero. lr_at(total_steps) is exactly zero.
struct Schedule {
  double base_lr = 1.5e-4;
  double warmup_fraction = 0.025;
  long total_steps = 1;
};

double lr_at(const Schedule& s, long step);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Decoupled weight decay; moment buffers keyed by position in the param list,
// which must stay stable across steps.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<NamedParam>& params, double lr);
  long steps_taken() const { return t_; }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<nn::Mat> m_, v_;
};

struct TrainLog {
  std::vector<double> loss;       // per-epoch mean (total loss in stage 2)
  std::vector<double> loss_img;   // stage-2 components; empty when absent
  std::vector<double> loss_vid;
  std::vector<double> loss_pixel;
  std::vector<double> lr;         // lr at the last step of each epoch
  std::vector<double> seconds;    // per-epoch wall clock
};

// CSV columns: epoch,loss,lr,seconds
void save_stage1_log(const TrainLog& log, const std::string& path);
// CSV columns: epoch,loss_total,loss_img,loss_vid,loss_pixel,lr,seconds;
// component columns for branches not in the run are left empty.
void save_stage2_log(const TrainLog& log, const std::string& path);

}  // namespace mvd::train
