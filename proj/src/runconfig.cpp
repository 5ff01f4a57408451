#include "mvd/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mvd::cli {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key " + key + ": '" + v + "' is not an integer");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key " + key + ": '" + v + "' is not a nonnegative integer");
  }
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key " + key + ": '" + v + "' is not a number");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config key " + key + ": '" + v + "' is not true/false");
}

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  const std::string k = dotted_key;
  const std::string v = value;

  if (k == "data.task") {
    if (v != "spatial" && v != "temporal") {
      throw std::invalid_argument("data.task must be spatial or temporal, got '" + v + "'");
    }
    data_task = v;
  } else if (k == "data.n_train") {
    data_n_train = parse_int(k, v);
  } else if (k == "data.n_val") {
    data_n_val = parse_int(k, v);
  } else if (k == "data.seed") {
    data_seed = parse_u64(k, v);
  } else if (k == "data.t") {
    data_t = parse_int(k, v);
  } else if (k == "data.h") {
    data_h = parse_int(k, v);
  } else if (k == "data.w") {
    data_w = parse_int(k, v);
  } else if (k == "data.c") {
    data_c = parse_int(k, v);
  } else if (k == "data.class_count") {
    data_class_count = parse_int(k, v);
  } else if (k == "data.jitter_px") {
    data_jitter_px = parse_int(k, v);
  } else if (k == "model.embed_dim") {
    model_embed_dim = parse_int(k, v);
  } else if (k == "model.depth") {
    model_depth = parse_int(k, v);
  } else if (k == "model.heads") {
    model_heads = parse_int(k, v);
  } else if (k == "model.mlp_ratio") {
    model_mlp_ratio = parse_int(k, v);
  } else if (k == "model.decoder_dim") {
    model_decoder_dim = parse_int(k, v);
  } else if (k == "model.decoder_depth") {
    model_decoder_depth = parse_int(k, v);
  } else if (k == "model.pt") {
    model_pt = parse_int(k, v);
  } else if (k == "model.ps") {
    model_ps = parse_int(k, v);
  } else if (k == "stage1.mask_ratio") {
    stage1_mask_ratio = parse_real(k, v);
  } else if (k == "stage1.epochs") {
    stage1_epochs = parse_int(k, v);
  } else if (k == "stage1.batch_size") {
    stage1_batch_size = parse_int(k, v);
  } else if (k == "stage1.base_lr") {
    stage1_base_lr = parse_real(k, v);
  } else if (k == "stage1.weight_decay") {
    stage1_weight_decay = parse_real(k, v);
  } else if (k == "stage1.beta1") {
    stage1_beta1 = parse_real(k, v);
  } else if (k == "stage1.beta2") {
    stage1_beta2 = parse_real(k, v);
  } else if (k == "stage1.warmup_fraction") {
    stage1_warmup_fraction = parse_real(k, v);
  } else if (k == "stage1.normalize_targets") {
    stage1_normalize_targets = parse_bool(k, v);
  } else if (k == "stage1.seed") {
    stage1_seed = parse_u64(k, v);
  } else if (k == "stage2.lambda_img") {
    stage2_lambda_img = parse_real(k, v);
  } else if (k == "stage2.lambda_vid") {
    stage2_lambda_vid = parse_real(k, v);
  } else if (k == "stage2.mask_ratio") {
    stage2_mask_ratio = parse_real(k, v);
  } else if (k == "stage2.smooth_l1_beta") {
    stage2_smooth_l1_beta = parse_real(k, v);
  } else if (k == "stage2.pixel_branch") {
    stage2_pixel_branch = parse_bool(k, v);
  } else if (k == "stage2.target_norm") {
    if (v != "none" && v != "layernorm") {
      throw std::invalid_argument("stage2.target_norm must be none or layernorm, got '" + v + "'");
    }
    stage2_target_norm = v;
  } else if (k == "stage2.epochs") {
    stage2_epochs = parse_int(k, v);
  } else if (k == "stage2.batch_size") {
    stage2_batch_size = parse_int(k, v);
  } else if (k == "stage2.base_lr") {
    stage2_base_lr = parse_real(k, v);
  } else if (k == "stage2.weight_decay") {
    stage2_weight_decay = parse_real(k, v);
  } else if (k == "stage2.beta1") {
    stage2_beta1 = parse_real(k, v);
  } else if (k == "stage2.beta2") {
    stage2_beta2 = parse_real(k, v);
  } else if (k == "stage2.warmup_fraction") {
    stage2_warmup_fraction = parse_real(k, v);
  } else if (k == "stage2.momentum") {
    stage2_momentum = parse_real(k, v);
  } else if (k == "stage2.seed") {
    stage2_seed = parse_u64(k, v);
  } else if (k == "eval.epochs") {
    eval_epochs = parse_int(k, v);
  } else if (k == "eval.batch_size") {
    eval_batch_size = parse_int(k, v);
  } else if (k == "eval.base_lr") {
    eval_base_lr = parse_real(k, v);
  } else if (k == "eval.weight_decay") {
    eval_weight_decay = parse_real(k, v);
  } else if (k == "eval.beta1") {
    eval_beta1 = parse_real(k, v);
  } else if (k == "eval.beta2") {
    eval_beta2 = parse_real(k, v);
  } else if (k == "eval.warmup_fraction") {
    eval_warmup_fraction = parse_real(k, v);
  } else if (k == "eval.linear_probe") {
    eval_linear_probe = parse_bool(k, v);
  } else if (k == "eval.seed") {
    eval_seed = parse_u64(k, v);
  } else {
    throw std::invalid_argument("unknown config key '" + k + "'");
  }
}

std::string RunConfig::to_ini() const {
  std::ostringstream out;
  out << "[data]\n";
  out << "task = " << data_task << "\n";
  out << "n_train = " << data_n_train << "\n";
  out << "n_val = " << data_n_val << "\n";
  out << "seed = " << data_seed << "\n";
  out << "t = " << data_t << "\n";
  out << "h = " << data_h << "\n";
  out << "w = " << data_w << "\n";
  out << "c = " << data_c << "\n";
  if (data_class_count) out << "class_count = " << *data_class_count << "\n";
  out << "jitter_px = " << data_jitter_px << "\n";

  out << "[model]\n";
  out << "embed_dim = " << model_embed_dim << "\n";
  out << "depth = " << model_depth << "\n";
  out << "heads = " << model_heads << "\n";
  out << "mlp_ratio = " << model_mlp_ratio << "\n";
  out << "decoder_dim = " << model_decoder_dim << "\n";
  out << "decoder_depth = " << model_decoder_depth << "\n";
  out << "pt = " << model_pt << "\n";
  out << "ps = " << model_ps << "\n";

  out << "[stage1]\n";
  if (stage1_mask_ratio) out << "mask_ratio = " << fmt_real(*stage1_mask_ratio) << "\n";
  out << "epochs = " << stage1_epochs << "\n";
  out << "batch_size = " << stage1_batch_size << "\n";
  out << "base_lr = " << fmt_real(stage1_base_lr) << "\n";
  out << "weight_decay = " << fmt_real(stage1_weight_decay) << "\n";
  out << "beta1 = " << fmt_real(stage1_beta1) << "\n";
  out << "beta2 = " << fmt_real(stage1_beta2) << "\n";
  out << "warmup_fraction = " << fmt_real(stage1_warmup_fraction) << "\n";
  out << "normalize_targets = " << (stage1_normalize_targets ? "true" : "false") << "\n";
  out << "seed = " << stage1_seed << "\n";

  out << "[stage2]\n";
  if (stage2_lambda_img) out << "lambda_img = " << fmt_real(*stage2_lambda_img) << "\n";
  if (stage2_lambda_vid) out << "lambda_vid = " << fmt_real(*stage2_lambda_vid) << "\n";
  out << "mask_ratio = " << fmt_real(stage2_mask_ratio) << "\n";
  out << "smooth_l1_beta = " << fmt_real(stage2_smooth_l1_beta) << "\n";
  out << "pixel_branch = " << (stage2_pixel_branch ? "true" : "false") << "\n";
  out << "target_norm = " << stage2_target_norm << "\n";
  out << "epochs = " << stage2_epochs << "\n";
  out << "batch_size = " << stage2_batch_size << "\n";
  out << "base_lr = " << fmt_real(stage2_base_lr) << "\n";
  out << "weight_decay = " << fmt_real(stage2_weight_decay) << "\n";
  out << "beta1 = " << fmt_real(stage2_beta1) << "\n";
  out << "beta2 = " << fmt_real(stage2_beta2) << "\n";
  out << "warmup_fraction = " << fmt_real(stage2_warmup_fraction) << "\n";
  out << "momentum = " << fmt_real(stage2_momentum) << "\n";
  out << "seed = " << stage2_seed << "\n";

  out << "[eval]\n";
  out << "epochs = " << eval_epochs << "\n";
  out << "batch_size = " << eval_batch_size << "\n";
  out << "base_lr = " << fmt_real(eval_base_lr) << "\n";
  out << "weight_decay = " << fmt_real(eval_weight_decay) << "\n";
  out << "beta1 = " << fmt_real(eval_beta1) << "\n";
  out << "beta2 = " << fmt_real(eval_beta2) << "\n";
  out << "warmup_fraction = " << fmt_real(eval_warmup_fraction) << "\n";
  out << "linear_probe = " << (eval_linear_probe ? "true" : "false") << "\n";
  out << "seed = " << eval_seed << "\n";
  return out.str();
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) {
        throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": bad section header");
      }
      section = t.substr(1, t.size() - 2);
      if (section != "data" && section != "model" && section != "stage1" && section != "stage2" &&
          section != "eval") {
        throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": unknown section [" +
                                    section + "]");
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (section.empty()) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": key outside any section");
    }
    try {
      cfg.set(section + "." + key, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(origin + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, buf.str(), path);
  return cfg;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--set expects section.key=value, got '" + s + "'");
    }
    cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
}

}  // namespace mvd::cli
