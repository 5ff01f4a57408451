#include "mvd/stage1.hpp"

#include <chrono>
#include <stdexcept>

#include "mvd/rng.hpp"

namespace mvd::train {

void validate_pretrain_config(const PretrainConfig& cfg) {
  if (!(cfg.mask_ratio >= 0.0 && cfg.mask_ratio < 1.0)) {
    throw std::invalid_argument("mask_ratio must be in [0,1)");
  }
  if (cfg.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(cfg.base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
  if (!(cfg.warmup_fraction >= 0.0 && cfg.warmup_fraction < 1.0)) {
    throw std::invalid_argument("warmup_fraction must be in [0,1)");
  }
  if (!(cfg.weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
    throw std::invalid_argument("betas must be in [0,1)");
  }
}

nn::Var pixel_recon_loss(const nn::Var& y, const tok::PatchTargets& targets,
                         const std::vector<int>& mask_rows) {
  return nn::mse_masked(y, nn::constant(targets.vectors), mask_rows);
}

namespace {

struct Sample {
  nn::Mat tokens;  // layout.total x patch_dim, model input
  nn::Mat target;  // same shape, optionally per-patch standardized
};

std::vector<NamedParam> collect_params(model::TransformerModel& enc, model::DecoderModel& dec) {
  std::vector<NamedParam> out;
  for (const auto& name : enc.store.names) {
    const nn::Var& v = enc.store.get(name);
    if (v->requires_grad) out.push_back({"encoder." + name, v});
  }
  for (const auto& name : dec.store.names) {
    const nn::Var& v = dec.store.get(name);
    if (v->requires_grad) out.push_back({"decoder." + name, v});
  }
  return out;
}

PretrainResult run_masked_pretrain(std::vector<Sample> samples, const model::ModelConfig& mcfg,
                                   const PretrainConfig& cfg) {
  validate_pretrain_config(cfg);
  model::validate_config(mcfg);
  if (samples.empty()) throw std::invalid_argument("pretraining needs a nonempty corpus");

  const tok::TokenLayout& layout = mcfg.layout;
  const int patch_dim = mcfg.patch_dim();
  for (const Sample& s : samples) {
    if (s.tokens.rows != layout.total() || s.tokens.cols != patch_dim) {
      throw std::invalid_argument("sample token shape does not match model layout");
    }
  }

  model::TransformerModel encoder = model::init_model(mcfg, derive_seed(cfg.seed, "init", 0));
  model::DecoderConfig dcfg;
  dcfg.input_dim = mcfg.embed_dim;
  dcfg.dim = mcfg.decoder_dim;
  dcfg.depth = mcfg.decoder_depth;
  dcfg.heads = mcfg.heads;
  dcfg.mlp_ratio = mcfg.mlp_ratio;
  dcfg.output_dim = patch_dim;
  dcfg.layout = layout;
  model::DecoderModel decoder = model::init_decoder(dcfg, derive_seed(cfg.seed, "decoder", 0));

  auto params = collect_params(encoder, decoder);
  AdamW opt(AdamWConfig{cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  const int n = static_cast<int>(samples.size());
  const long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  Schedule sched{cfg.base_lr, cfg.warmup_fraction, steps_per_epoch * cfg.epochs};

  TrainLog log;
  long global_step = 0;
  std::uint64_t mask_counter = 0;
  std::vector<int> order(samples.size());
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng(derive_seed(cfg.seed, "order", static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);

    double epoch_loss = 0.0;
    double last_lr = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      nn::Var batch_loss;
      for (int b = 0; b < bsz; ++b) {
        const Sample& s = samples[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
        const tok::TubeMask mask =
            tok::make_tube_mask(layout, cfg.mask_ratio, derive_seed(cfg.seed, "mask", mask_counter++));
        tok::SplitTokens split = tok::split_visible(s.tokens, mask);
        nn::Var feats = model::encode(encoder, split.visible, split.visible_idx);
        nn::Var pred = model::decode(decoder, feats, split.visible_idx, split.masked_idx);
        nn::Var loss = nn::mse_masked(pred, nn::constant(s.target), split.masked_idx);
        epoch_loss += loss->value.at(0, 0);
        batch_loss = batch_loss ? nn::add(batch_loss, loss) : loss;
      }
      batch_loss = nn::scale(batch_loss, 1.0 / bsz);
      nn::backward(batch_loss);
      last_lr = lr_at(sched, global_step);
      opt.step(params, last_lr);
      for (auto& p : params) p.var->zero_grad();
      ++global_step;
    }
    const auto t1 = std::chrono::steady_clock::now();
    log.loss.push_back(epoch_loss / n);
    log.lr.push_back(last_lr);
    log.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }

  return PretrainResult{std::move(encoder), std::move(log)};
}

nn::Mat target_of(const tok::PatchTargets& patches, bool normalize) {
  return normalize ? tok::normalize_patches(patches).vectors : patches.vectors;
}

}  // namespace

PretrainResult pretrain_image_teacher(const data::LabeledVideoSet& corpus,
                                      const model::ModelConfig& mcfg, const PretrainConfig& cfg) {
  if (mcfg.modality != model::Modality::image) {
    throw std::invalid_argument("image pretraining requires an image-modality config");
  }
  if (corpus.clips.empty()) throw std::invalid_argument("empty corpus");
  const data::VideoClip& probe = corpus.clips[0];
  if (mcfg.layout.h_tokens * mcfg.layout.ps != probe.h ||
      mcfg.layout.w_tokens * mcfg.layout.ps != probe.w || mcfg.channels != probe.c) {
    throw std::invalid_argument("model layout does not match corpus frames");
  }

  const data::NormStats stats = data::compute_norm_stats(corpus);
  std::vector<Sample> samples;
  samples.reserve(corpus.clips.size() * static_cast<std::size_t>(probe.t));
  for (const data::VideoClip& clip : corpus.clips) {
    const data::ClipArray arr = data::normalize(clip, stats);
    for (int f = 0; f < arr.t; ++f) {
      data::ClipArray frame{1, arr.h, arr.w, arr.c, {}};
      frame.v.assign(arr.v.begin() + static_cast<std::ptrdiff_t>(f) * arr.h * arr.w * arr.c,
                     arr.v.begin() + static_cast<std::ptrdiff_t>(f + 1) * arr.h * arr.w * arr.c);
      tok::PatchTargets patches = tok::patchify_image(frame, mcfg.layout);
      samples.push_back({patches.vectors, target_of(patches, cfg.normalize_targets)});
    }
  }
  return run_masked_pretrain(std::move(samples), mcfg, cfg);
}

PretrainResult pretrain_video_teacher(const data::LabeledVideoSet& corpus,
                                      const model::ModelConfig& mcfg, const PretrainConfig& cfg) {
  if (mcfg.modality != model::Modality::video) {
    throw std::invalid_argument("video pretraining requires a video-modality config");
  }
  if (corpus.clips.empty()) throw std::invalid_argument("empty corpus");
  const data::VideoClip& probe = corpus.clips[0];
  if (mcfg.layout.t_tokens * mcfg.layout.pt != probe.t ||
      mcfg.layout.h_tokens * mcfg.layout.ps != probe.h ||
      mcfg.layout.w_tokens * mcfg.layout.ps != probe.w || mcfg.channels != probe.c) {
    throw std::invalid_argument("model layout does not match corpus clips");
  }

  const data::NormStats stats = data::compute_norm_stats(corpus);
  std::vector<Sample> samples;
  samples.reserve(corpus.clips.size());
  for (const data::VideoClip& clip : corpus.clips) {
    tok::PatchTargets patches = tok::patchify_video(data::normalize(clip, stats), mcfg.layout);
    samples.push_back({patches.vectors, target_of(patches, cfg.normalize_targets)});
  }
  return run_masked_pretrain(std::move(samples), mcfg, cfg);
}

}  // namespace mvd::train
