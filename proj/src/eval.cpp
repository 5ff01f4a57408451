#include "mvd/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "mvd/optim.hpp"
#include "mvd/rng.hpp"
#include "mvd/threading.hpp"
#include "mvd/tokenizer.hpp"

namespace mvd::eval {

namespace {

std::vector<int> all_indices(int n) {
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = i;
  return out;
}

void check_corpus_layout(const model::ModelConfig& cfg, const data::LabeledVideoSet& set) {
  if (set.clips.empty()) throw std::invalid_argument("empty corpus");
  const data::VideoClip& probe = set.clips[0];
  const tok::TokenLayout& layout = cfg.layout;
  if (probe.t != layout.t_tokens * layout.pt || probe.h != layout.h_tokens * layout.ps ||
      probe.w != layout.w_tokens * layout.ps || probe.c != cfg.channels) {
    throw std::invalid_argument("corpus geometry does not match model layout");
  }
}

int argmax_row(const nn::Mat& m, long row) {
  int best = 0;
  for (long c = 1; c < m.cols; ++c) {
    if (m.at(row, c) > m.at(row, best)) best = static_cast<int>(c);
  }
  return best;
}

}  // namespace

FinetuneResult finetune(const model::TransformerModel& encoder,
                        const data::LabeledVideoSet& train_set,
                        const data::LabeledVideoSet& val_set, const FinetuneConfig& cfg) {
  if (encoder.config.modality != model::Modality::video) {
    throw std::invalid_argument("finetuning expects a video encoder");
  }
  if (train_set.class_count <= 0 || train_set.class_count != val_set.class_count) {
    throw std::invalid_argument("train and val class counts differ");
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("epochs and batch_size must be >= 1");
  check_corpus_layout(encoder.config, train_set);
  check_corpus_layout(encoder.config, val_set);

  const tok::TokenLayout& layout = encoder.config.layout;
  const std::vector<int> all = all_indices(layout.total());
  const data::NormStats stats = data::compute_norm_stats(train_set);

  auto tokens_of = [&](const data::LabeledVideoSet& set) {
    std::vector<nn::Mat> out(set.clips.size());
    parallel_for(static_cast<int>(set.clips.size()), [&](int i) {
      out[static_cast<std::size_t>(i)] =
          tok::patchify_video(data::normalize(set.clips[static_cast<std::size_t>(i)], stats), layout)
              .vectors;
    });
    return out;
  };
  const std::vector<nn::Mat> train_tokens = tokens_of(train_set);
  const std::vector<nn::Mat> val_tokens = tokens_of(val_set);

  model::TransformerModel enc = model::clone_model(encoder, /*trainable=*/!cfg.linear_probe);

  const int dim = encoder.config.embed_dim;
  const int classes = train_set.class_count;
  model::ParamStore head;
  {
    Rng rng(derive_seed(cfg.seed, "head", 0));
    nn::Mat w(dim, classes);
    for (auto& x : w.d) x = 0.02 * rng.normal();
    head.add("weight", std::move(w));
    head.add("bias", nn::Mat::zeros(1, classes));
  }

  std::vector<train::NamedParam> params;
  if (!cfg.linear_probe) {
    for (const auto& name : enc.store.names) params.push_back({"encoder." + name, enc.store.get(name)});
  }
  params.push_back({"head.weight", head.get("weight")});
  params.push_back({"head.bias", head.get("bias")});
  train::AdamW opt(train::AdamWConfig{cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  // With a fixed encoder the pooled features are constants; compute them once.
  std::vector<nn::Mat> probe_feats;
  if (cfg.linear_probe) {
    probe_feats.resize(train_tokens.size());
    parallel_for(static_cast<int>(train_tokens.size()), [&](int i) {
      nn::Var pooled = nn::mean_rows(model::encode(enc, train_tokens[static_cast<std::size_t>(i)], all));
      probe_feats[static_cast<std::size_t>(i)] = pooled->value;
    });
  }

  const int n = static_cast<int>(train_tokens.size());
  const long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  train::Schedule sched{cfg.base_lr, cfg.warmup_fraction, steps_per_epoch * cfg.epochs};

  std::vector<int> order(train_tokens.size());
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  long global_step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng(derive_seed(cfg.seed, "order", static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      std::vector<nn::Var> pooled;
      std::vector<int> labels;
      pooled.reserve(static_cast<std::size_t>(bsz));
      labels.reserve(static_cast<std::size_t>(bsz));
      for (int b = 0; b < bsz; ++b) {
        const int idx = order[static_cast<std::size_t>(start + b)];
        if (cfg.linear_probe) {
          pooled.push_back(nn::constant(probe_feats[static_cast<std::size_t>(idx)]));
        } else {
          pooled.push_back(nn::mean_rows(model::encode(enc, train_tokens[static_cast<std::size_t>(idx)], all)));
        }
        labels.push_back(train_set.labels[static_cast<std::size_t>(idx)]);
      }
      nn::Var features = bsz == 1 ? pooled[0] : nn::concat_rows(pooled);
      nn::Var logits = nn::add_rowvec(nn::matmul(features, head.get("weight")), head.get("bias"));
      nn::Var loss = nn::cross_entropy(logits, labels);
      nn::backward(loss);
      opt.step(params, train::lr_at(sched, global_step));
      for (auto& p : params) p.var->zero_grad();
      ++global_step;
    }
  }

  FinetuneResult result;
  result.head_weight = head.get("weight")->value;
  result.head_bias = head.get("bias")->value;

  std::vector<int> predictions(val_tokens.size());
  parallel_for(static_cast<int>(val_tokens.size()), [&](int i) {
    nn::Var pooled = nn::mean_rows(model::encode(enc, val_tokens[static_cast<std::size_t>(i)], all));
    nn::Mat logits(1, classes);
    for (int c = 0; c < classes; ++c) {
      double z = result.head_bias.at(0, c);
      for (int k = 0; k < dim; ++k) z += pooled->value.at(0, k) * result.head_weight.at(k, c);
      logits.at(0, c) = z;
    }
    predictions[static_cast<std::size_t>(i)] = argmax_row(logits, 0);
  });
  long correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] == val_set.labels[i]) ++correct;
  }
  result.top1 = static_cast<double>(correct) / static_cast<double>(val_tokens.size());
  return result;
}

namespace {

SimilarityMatrix cosine_matrix(const std::vector<std::vector<double>>& vecs) {
  const int n = static_cast<int>(vecs.size());
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (const double v : vecs[static_cast<std::size_t>(i)]) s += v * v;
    norms[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  SimilarityMatrix sim;
  sim.m = nn::Mat(n, n);
  for (int i = 0; i < n; ++i) {
    sim.m.at(i, i) = 1.0;
    for (int j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < vecs[static_cast<std::size_t>(i)].size(); ++k) {
        dot += vecs[static_cast<std::size_t>(i)][k] * vecs[static_cast<std::size_t>(j)][k];
      }
      const double v = dot / (norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)]);
      sim.m.at(i, j) = v;
      sim.m.at(j, i) = v;
    }
  }
  for (const double v : sim.m.d) {
    if (!std::isfinite(v)) throw std::runtime_error("non-finite feature similarity");
  }
  return sim;
}

}  // namespace

SimilarityMatrix frame_similarity(const model::TransformerModel& model,
                                  const data::ClipArray& clip) {
  const model::ModelConfig& cfg = model.config;
  if (cfg.modality == model::Modality::video) {
    const tok::TokenLayout& layout = cfg.layout;
    if (clip.t != layout.t_tokens * layout.pt || clip.h != layout.h_tokens * layout.ps ||
        clip.w != layout.w_tokens * layout.ps || clip.c != cfg.channels) {
      throw std::invalid_argument("clip geometry does not match model layout");
    }
    tok::PatchTargets patches = tok::patchify_video(clip, layout);
    nn::Var feats = model::encode(model, patches.vectors, all_indices(layout.total()));
    const int hw = layout.spatial();
    std::vector<std::vector<double>> frame_vecs(static_cast<std::size_t>(layout.t_tokens));
    for (int tau = 0; tau < layout.t_tokens; ++tau) {
      std::vector<double>& v = frame_vecs[static_cast<std::size_t>(tau)];
      v.assign(static_cast<std::size_t>(cfg.embed_dim), 0.0);
      for (int s = 0; s < hw; ++s) {
        for (int k = 0; k < cfg.embed_dim; ++k) {
          v[static_cast<std::size_t>(k)] += feats->value.at(tau * hw + s, k);
        }
      }
      for (auto& x : v) x /= hw;
    }
    return cosine_matrix(frame_vecs);
  }

  const tok::TokenLayout& layout = cfg.layout;
  if (clip.h != layout.h_tokens * layout.ps || clip.w != layout.w_tokens * layout.ps ||
      clip.c != cfg.channels) {
    throw std::invalid_argument("clip geometry does not match model layout");
  }
  const std::ptrdiff_t frame_elems = static_cast<std::ptrdiff_t>(clip.h) * clip.w * clip.c;
  const std::vector<int> all = all_indices(layout.total());
  std::vector<std::vector<double>> frame_vecs(static_cast<std::size_t>(clip.t));
  for (int f = 0; f < clip.t; ++f) {
    data::ClipArray frame{1, clip.h, clip.w, clip.c, {}};
    frame.v.assign(clip.v.begin() + f * frame_elems, clip.v.begin() + (f + 1) * frame_elems);
    tok::PatchTargets patches = tok::patchify_image(frame, layout);
    nn::Var feats = model::encode(model, patches.vectors, all);
    std::vector<double>& v = frame_vecs[static_cast<std::size_t>(f)];
    v.assign(static_cast<std::size_t>(cfg.embed_dim), 0.0);
    for (int s = 0; s < layout.total(); ++s) {
      for (int k = 0; k < cfg.embed_dim; ++k) v[static_cast<std::size_t>(k)] += feats->value.at(s, k);
    }
    for (auto& x : v) x /= layout.total();
  }
  return cosine_matrix(frame_vecs);
}

AggregateSimilarity aggregate_similarity(const model::TransformerModel& model,
                                         const data::LabeledVideoSet& set) {
  if (set.clips.empty()) throw std::invalid_argument("similarity aggregate needs a nonempty set");
  const data::NormStats stats = data::compute_norm_stats(set);
  std::vector<SimilarityMatrix> mats(set.clips.size());
  parallel_for(static_cast<int>(set.clips.size()), [&](int i) {
    mats[static_cast<std::size_t>(i)] =
        frame_similarity(model, data::normalize(set.clips[static_cast<std::size_t>(i)], stats));
  });
  AggregateSimilarity agg;
  agg.mean.m = nn::Mat::zeros(mats[0].m.rows, mats[0].m.cols);
  for (const SimilarityMatrix& sm : mats) {
    for (std::size_t k = 0; k < sm.m.d.size(); ++k) agg.mean.m.d[k] += sm.m.d[k];
  }
  for (auto& x : agg.mean.m.d) x /= static_cast<double>(mats.size());

  double off_sum = 0.0;
  long off_count = 0;
  for (long i = 0; i < agg.mean.m.rows; ++i) {
    for (long j = 0; j < agg.mean.m.cols; ++j) {
      if (i == j) continue;
      off_sum += agg.mean.m.at(i, j);
      ++off_count;
    }
  }
  agg.off_diagonal_mean = off_count > 0 ? off_sum / static_cast<double>(off_count) : 1.0;
  return agg;
}

EvalReport compare_report(const std::vector<ModelEntry>& models,
                          const std::vector<TaskEntry>& tasks, const FinetuneConfig& cfg) {
  if (models.empty() || tasks.empty()) {
    throw std::invalid_argument("comparison needs at least one model and one task");
  }
  EvalReport report;
  for (const ModelEntry& me : models) {
    for (const TaskEntry& te : tasks) {
      FinetuneConfig run_cfg = cfg;
      run_cfg.seed = derive_seed(cfg.seed, me.tag + "/" + te.tag, 0);
      FinetuneResult r = finetune(*me.model, *te.train, *te.val, run_cfg);
      report.rows.push_back({me.tag, te.tag, r.top1});
    }
  }
  std::string summary;
  for (const TaskEntry& te : tasks) {
    const EvalRow* best = nullptr;
    for (const EvalRow& row : report.rows) {
      if (row.task_tag != te.tag) continue;
      if (!best || row.top1 > best->top1) best = &row;
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", best->top1);
    summary += "task " + te.tag + ": best " + best->model_tag + " (" + buf + ")\n";
  }
  report.summary = summary;
  return report;
}

void save_similarity_csv(const SimilarityMatrix& sim, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  char buf[32];
  for (long i = 0; i < sim.m.rows; ++i) {
    for (long j = 0; j < sim.m.cols; ++j) {
      std::snprintf(buf, sizeof(buf), "%.6f", sim.m.at(i, j));
      out << (j ? "," : "") << buf;
    }
    out << "\n";
  }
}

void save_eval_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "model,task,top1\n";
  char buf[32];
  for (const EvalRow& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", row.top1);
    out << row.model_tag << "," << row.task_tag << "," << buf << "\n";
  }
}

}  // namespace mvd::eval
