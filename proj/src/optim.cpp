#include "mvd/optim.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace mvd::train {

double lr_at(const Schedule& s, long step) {
  if (s.total_steps < 1) throw std::invalid_argument("schedule needs at least one step");
  if (!(s.warmup_fraction >= 0.0 && s.warmup_fraction < 1.0)) {
    throw std::invalid_argument("warmup_fraction must be in [0,1)");
  }
  long warmup = std::lround(s.warmup_fraction * static_cast<double>(s.total_steps));
  if (warmup >= s.total_steps) warmup = s.total_steps - 1;
  if (step < warmup) {
    return s.base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(s.total_steps - warmup);
  return s.base_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));
}

void AdamW::step(const std::vector<NamedParam>& params, double lr) {
  if (m_.empty()) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto& p : params) {
      m_.push_back(nn::Mat::zeros(p.var->value.rows, p.var->value.cols));
      v_.push_back(nn::Mat::zeros(p.var->value.rows, p.var->value.cols));
    }
  }
  if (m_.size() != params.size()) {
    throw std::invalid_argument("optimizer state does not match parameter list");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    nn::Node& node = *params[i].var;
    nn::Mat& m = m_[i];
    nn::Mat& v = v_[i];
    if (node.value.rows != m.rows || node.value.cols != m.cols) {
      throw std::invalid_argument("parameter " + params[i].name + " changed shape mid-run");
    }
    const bool has_grad = node.grad_ready;
    for (std::size_t k = 0; k < node.value.d.size(); ++k) {
      const double g = has_grad ? node.grad.d[k] : 0.0;
      if (!std::isfinite(g)) {
        throw std::runtime_error("non-finite gradient in " + params[i].name);
      }
      m.d[k] = cfg_.beta1 * m.d[k] + (1.0 - cfg_.beta1) * g;
      v.d[k] = cfg_.beta2 * v.d[k] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m.d[k] / bc1;
      const double vhat = v.d[k] / bc2;
      node.value.d[k] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * node.value.d[k]);
    }
  }
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void save_stage1_log(const TrainLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,loss,lr,seconds\n";
  for (std::size_t e = 0; e < log.loss.size(); ++e) {
    out << e << "," << fmt(log.loss[e]) << "," << fmt(log.lr[e]) << "," << fmt(log.seconds[e])
        << "\n";
  }
}

void save_stage2_log(const TrainLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,loss_total,loss_img,loss_vid,loss_pixel,lr,seconds\n";
  for (std::size_t e = 0; e < log.loss.size(); ++e) {
    out << e << "," << fmt(log.loss[e]) << ",";
    if (e < log.loss_img.size()) out << fmt(log.loss_img[e]);
    out << ",";
    if (e < log.loss_vid.size()) out << fmt(log.loss_vid[e]);
    out << ",";
    if (e < log.loss_pixel.size()) out << fmt(log.loss_pixel[e]);
    out << "," << fmt(log.lr[e]) << "," << fmt(log.seconds[e]) << "\n";
  }
}

}  // namespace mvd::train
