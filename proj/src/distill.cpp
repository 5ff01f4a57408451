#include "mvd/distill.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "mvd/rng.hpp"

namespace mvd::distill {

void validate_distill_config(const DistillConfig& cfg, const TeacherBundle& teachers) {
  if (!(cfg.lambda_img >= 0.0 && cfg.lambda_vid >= 0.0)) {
    throw std::invalid_argument("lambdas must be nonnegative");
  }
  if (!(cfg.lambda_img + cfg.lambda_vid > 0.0)) {
    throw std::invalid_argument("lambda_img + lambda_vid must be positive");
  }
  if (cfg.lambda_img > 0.0 && teachers.image_teacher == nullptr) {
    throw std::invalid_argument("lambda_img > 0 requires an image teacher");
  }
  if (cfg.lambda_vid > 0.0 && teachers.video_teacher == nullptr) {
    throw std::invalid_argument("lambda_vid > 0 requires a video teacher");
  }
  if (teachers.image_teacher == nullptr && teachers.video_teacher == nullptr) {
    throw std::invalid_argument("at least one teacher is required");
  }
  if (teachers.image_teacher) {
    if (!teachers.image_teacher->frozen) throw std::invalid_argument("image teacher must be frozen");
    if (teachers.image_teacher->config.modality != model::Modality::image) {
      throw std::invalid_argument("image teacher has wrong modality");
    }
  }
  if (teachers.video_teacher) {
    if (!teachers.video_teacher->frozen) throw std::invalid_argument("video teacher must be frozen");
    if (teachers.video_teacher->config.modality != model::Modality::video) {
      throw std::invalid_argument("video teacher has wrong modality");
    }
  }
  if (!(cfg.mask_ratio >= 0.0 && cfg.mask_ratio < 1.0)) {
    throw std::invalid_argument("mask_ratio must be in [0,1)");
  }
  if (!(cfg.smooth_l1_beta > 0.0)) throw std::invalid_argument("smooth_l1_beta must be positive");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("epochs and batch_size must be >= 1");
  if (!(cfg.base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
  if (!(cfg.warmup_fraction >= 0.0 && cfg.warmup_fraction < 1.0)) {
    throw std::invalid_argument("warmup_fraction must be in [0,1)");
  }
}

nn::Mat video_teacher_targets(const data::ClipArray& clip, const model::TransformerModel& h_vid) {
  if (h_vid.config.modality != model::Modality::video) {
    throw std::invalid_argument("video targets require a video-modality teacher");
  }
  const tok::TokenLayout& layout = h_vid.config.layout;
  if (clip.t != layout.t_tokens * layout.pt || clip.h != layout.h_tokens * layout.ps ||
      clip.w != layout.w_tokens * layout.ps || clip.c != h_vid.config.channels) {
    throw std::invalid_argument("clip geometry does not match video teacher layout");
  }
  tok::PatchTargets patches = tok::patchify_video(clip, layout);
  std::vector<int> all(static_cast<std::size_t>(layout.total()));
  for (int i = 0; i < layout.total(); ++i) all[static_cast<std::size_t>(i)] = i;
  nn::Var feats = model::encode(h_vid, patches.vectors, all);
  return feats->value;
}

nn::Mat image_teacher_targets(const data::ClipArray& clip, const model::TransformerModel& h_img,
                              const tok::TokenLayout& video_layout) {
  if (h_img.config.modality != model::Modality::image) {
    throw std::invalid_argument("image targets require an image-modality teacher");
  }
  const tok::TokenLayout& img_layout = h_img.config.layout;
  if (img_layout.h_tokens != video_layout.h_tokens || img_layout.w_tokens != video_layout.w_tokens) {
    throw std::invalid_argument("image teacher spatial grid does not match video layout");
  }
  if (clip.t != video_layout.t_tokens * video_layout.pt ||
      clip.h != img_layout.h_tokens * img_layout.ps ||
      clip.w != img_layout.w_tokens * img_layout.ps || clip.c != h_img.config.channels) {
    throw std::invalid_argument("clip geometry does not match teacher layouts");
  }
  const int hw = video_layout.spatial();
  const std::ptrdiff_t frame_elems =
      static_cast<std::ptrdiff_t>(clip.h) * clip.w * clip.c;
  std::vector<int> all(static_cast<std::size_t>(hw));
  for (int i = 0; i < hw; ++i) all[static_cast<std::size_t>(i)] = i;

  nn::Mat out(video_layout.total(), h_img.config.embed_dim);
  for (int tau = 0; tau < video_layout.t_tokens; ++tau) {
    const int f = tau * video_layout.pt;  // front time slice of the 3D patch
    data::ClipArray frame{1, clip.h, clip.w, clip.c, {}};
    frame.v.assign(clip.v.begin() + f * frame_elems, clip.v.begin() + (f + 1) * frame_elems);
    tok::PatchTargets patches = tok::patchify_image(frame, img_layout);
    nn::Var feats = model::encode(h_img, patches.vectors, all);
    for (int s = 0; s < hw; ++s) {
      for (int cdim = 0; cdim < h_img.config.embed_dim; ++cdim) {
        out.at(tau * hw + s, cdim) = feats->value.at(s, cdim);
      }
    }
  }
  return out;
}

void apply_target_norm(nn::Mat& targets, TargetNorm norm, double eps) {
  if (norm == TargetNorm::none) return;
  for (long r = 0; r < targets.rows; ++r) {
    double sum = 0.0, sumsq = 0.0;
    for (long c = 0; c < targets.cols; ++c) {
      sum += targets.at(r, c);
      sumsq += targets.at(r, c) * targets.at(r, c);
    }
    const double mean = sum / static_cast<double>(targets.cols);
    double var = sumsq / static_cast<double>(targets.cols) - mean * mean;
    if (var < 0.0) var = 0.0;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (long c = 0; c < targets.cols; ++c) {
      targets.at(r, c) = (targets.at(r, c) - mean) * inv;
    }
  }
}

nn::Var smooth_l1_feature_loss(const nn::Var& y, const nn::Mat& targets,
                               const std::vector<int>& mask_rows, double beta) {
  return nn::huber_masked(y, nn::constant(targets), mask_rows, beta);
}

StudentDecoders init_student_decoders(const model::ModelConfig& student_cfg,
                                      const TeacherBundle& teachers, const DistillConfig& cfg,
                                      std::uint64_t seed) {
  StudentDecoders dec;
  model::DecoderConfig base;
  base.input_dim = student_cfg.embed_dim;
  base.dim = student_cfg.decoder_dim;
  base.depth = student_cfg.decoder_depth;
  base.heads = student_cfg.heads;
  base.mlp_ratio = student_cfg.mlp_ratio;
  base.layout = student_cfg.layout;
  if (cfg.lambda_img > 0.0) {
    model::DecoderConfig c = base;
    c.output_dim = teachers.image_teacher->config.embed_dim;
    dec.img = std::make_unique<model::DecoderModel>(
        model::init_decoder(c, derive_seed(seed, "decoder_img", 0)));
  }
  if (cfg.lambda_vid > 0.0) {
    model::DecoderConfig c = base;
    c.output_dim = teachers.video_teacher->config.embed_dim;
    dec.vid = std::make_unique<model::DecoderModel>(
        model::init_decoder(c, derive_seed(seed, "decoder_vid", 0)));
  }
  if (cfg.pixel_branch) {
    model::DecoderConfig c = base;
    c.output_dim = student_cfg.patch_dim();
    dec.pix = std::make_unique<model::DecoderModel>(
        model::init_decoder(c, derive_seed(seed, "decoder_pix", 0)));
  }
  return dec;
}

LossParts mvd_loss(const model::TransformerModel& student, const StudentDecoders& decoders,
                   const std::vector<DistillBatchItem>& batch, const DistillConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  nn::Var img, vid, pix;
  for (const DistillBatchItem& item : batch) {
    tok::SplitTokens split = tok::split_visible(*item.tokens, item.mask);
    nn::Var feats = model::encode(student, split.visible, split.visible_idx);
    if (decoders.img) {
      if (!item.img_targets) throw std::invalid_argument("batch item lacks image targets");
      nn::Var pred = model::decode(*decoders.img, feats, split.visible_idx, split.masked_idx);
      nn::Var l = smooth_l1_feature_loss(pred, *item.img_targets, split.masked_idx, cfg.smooth_l1_beta);
      img = img ? nn::add(img, l) : l;
    }
    if (decoders.vid) {
      if (!item.vid_targets) throw std::invalid_argument("batch item lacks video targets");
      nn::Var pred = model::decode(*decoders.vid, feats, split.visible_idx, split.masked_idx);
      nn::Var l = smooth_l1_feature_loss(pred, *item.vid_targets, split.masked_idx, cfg.smooth_l1_beta);
      vid = vid ? nn::add(vid, l) : l;
    }
    if (decoders.pix) {
      if (!item.pixel_targets) throw std::invalid_argument("batch item lacks pixel targets");
      nn::Var pred = model::decode(*decoders.pix, feats, split.visible_idx, split.masked_idx);
      nn::Var l = nn::mse_masked(pred, nn::constant(*item.pixel_targets), split.masked_idx);
      pix = pix ? nn::add(pix, l) : l;
    }
  }
  LossParts parts;
  nn::Var total;
  if (img) {
    parts.img = nn::scale(img, inv_b);
    total = nn::scale(parts.img, cfg.lambda_img);
  }
  if (vid) {
    parts.vid = nn::scale(vid, inv_b);
    nn::Var term = nn::scale(parts.vid, cfg.lambda_vid);
    total = total ? nn::add(total, term) : term;
  }
  if (pix) {
    parts.pixel = nn::scale(pix, inv_b);
    total = total ? nn::add(total, parts.pixel) : parts.pixel;
  }
  if (!total) throw std::invalid_argument("no active distillation branch");
  parts.total = total;
  return parts;
}

DistillOutcome mvd_step(model::TransformerModel& student, StudentDecoders& decoders,
                        std::vector<train::NamedParam>& params, train::AdamW& opt, double lr,
                        const std::vector<DistillBatchItem>& batch, const DistillConfig& cfg) {
  LossParts parts = mvd_loss(student, decoders, batch, cfg);
  nn::backward(parts.total);
  opt.step(params, lr);
  for (auto& p : params) p.var->zero_grad();
  DistillOutcome out;
  out.total = parts.total->value.at(0, 0);
  if (parts.img) {
    out.has_img = true;
    out.img = parts.img->value.at(0, 0);
  }
  if (parts.vid) {
    out.has_vid = true;
    out.vid = parts.vid->value.at(0, 0);
  }
  if (parts.pixel) {
    out.has_pixel = true;
    out.pixel = parts.pixel->value.at(0, 0);
  }
  return out;
}

namespace {

void check_student_corpus(const model::ModelConfig& student_cfg, const data::LabeledVideoSet& corpus) {
  model::validate_config(student_cfg);
  if (student_cfg.modality != model::Modality::video) {
    throw std::invalid_argument("the student is a video model");
  }
  if (corpus.clips.empty()) throw std::invalid_argument("empty corpus");
  const data::VideoClip& probe = corpus.clips[0];
  const tok::TokenLayout& layout = student_cfg.layout;
  if (probe.t != layout.t_tokens * layout.pt || probe.h != layout.h_tokens * layout.ps ||
      probe.w != layout.w_tokens * layout.ps || probe.c != student_cfg.channels) {
    throw std::invalid_argument("student layout does not match corpus geometry");
  }
}

std::vector<train::NamedParam> collect_student_params(model::TransformerModel& student,
                                                      StudentDecoders& decoders) {
  std::vector<train::NamedParam> out;
  for (const auto& name : student.store.names) out.push_back({"student." + name, student.store.get(name)});
  auto add_dec = [&out](const char* tag, model::DecoderModel* dec) {
    if (!dec) return;
    for (const auto& name : dec->store.names) {
      out.push_back({std::string(tag) + "." + name, dec->store.get(name)});
    }
  };
  add_dec("decoder_img", decoders.img.get());
  add_dec("decoder_vid", decoders.vid.get());
  add_dec("decoder_pix", decoders.pix.get());
  return out;
}

struct ClipData {
  nn::Mat tokens;
  nn::Mat img_targets, vid_targets, pixel_targets;
  bool has_img = false, has_vid = false, has_pix = false;
};

}  // namespace

DistillResult distill(const model::ModelConfig& student_cfg, const TeacherBundle& teachers,
                      const data::LabeledVideoSet& corpus, const DistillConfig& cfg) {
  validate_distill_config(cfg, teachers);
  check_student_corpus(student_cfg, corpus);
  if (cfg.lambda_vid > 0.0) {
    const tok::TokenLayout& tl = teachers.video_teacher->config.layout;
    const tok::TokenLayout& sl = student_cfg.layout;
    if (tl.t_tokens != sl.t_tokens || tl.h_tokens != sl.h_tokens || tl.w_tokens != sl.w_tokens ||
        tl.pt != sl.pt || tl.ps != sl.ps) {
      throw std::invalid_argument("student and video teacher token layouts differ");
    }
  }

  const data::NormStats stats = data::compute_norm_stats(corpus);
  std::vector<ClipData> clips(corpus.clips.size());
  // Teachers are frozen and always see the full sequence, so their targets do
  // not depend on the mask and are computed once per clip.
  for (std::size_t i = 0; i < corpus.clips.size(); ++i) {
    const data::ClipArray arr = data::normalize(corpus.clips[i], stats);
    tok::PatchTargets patches = tok::patchify_video(arr, student_cfg.layout);
    ClipData& cd = clips[i];
    cd.tokens = patches.vectors;
    if (cfg.lambda_img > 0.0) {
      cd.img_targets = image_teacher_targets(arr, *teachers.image_teacher, student_cfg.layout);
      apply_target_norm(cd.img_targets, cfg.target_norm);
      cd.has_img = true;
    }
    if (cfg.lambda_vid > 0.0) {
      cd.vid_targets = video_teacher_targets(arr, *teachers.video_teacher);
      apply_target_norm(cd.vid_targets, cfg.target_norm);
      cd.has_vid = true;
    }
    if (cfg.pixel_branch) {
      cd.pixel_targets = tok::normalize_patches(patches).vectors;
      cd.has_pix = true;
    }
  }

  model::TransformerModel student = model::init_model(student_cfg, derive_seed(cfg.seed, "init", 0));
  StudentDecoders decoders = init_student_decoders(student_cfg, teachers, cfg, cfg.seed);
  auto params = collect_student_params(student, decoders);
  train::AdamW opt(train::AdamWConfig{cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  const int n = static_cast<int>(clips.size());
  const long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  train::Schedule sched{cfg.base_lr, cfg.warmup_fraction, steps_per_epoch * cfg.epochs};

  train::TrainLog log;
  long global_step = 0;
  std::uint64_t mask_counter = 0;
  std::vector<int> order(clips.size());
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng(derive_seed(cfg.seed, "order", static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);

    double sum_total = 0.0, sum_img = 0.0, sum_vid = 0.0, sum_pix = 0.0;
    long batches = 0;
    double last_lr = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      std::vector<DistillBatchItem> batch(static_cast<std::size_t>(bsz));
      for (int b = 0; b < bsz; ++b) {
        const ClipData& cd = clips[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
        DistillBatchItem& item = batch[static_cast<std::size_t>(b)];
        item.tokens = &cd.tokens;
        if (cd.has_img) item.img_targets = &cd.img_targets;
        if (cd.has_vid) item.vid_targets = &cd.vid_targets;
        if (cd.has_pix) item.pixel_targets = &cd.pixel_targets;
        item.mask = tok::make_tube_mask(student_cfg.layout, cfg.mask_ratio,
                                        derive_seed(cfg.seed, "mask", mask_counter++));
      }
      last_lr = train::lr_at(sched, global_step);
      DistillOutcome outcome = mvd_step(student, decoders, params, opt, last_lr, batch, cfg);
      sum_total += outcome.total;
      sum_img += outcome.img;
      sum_vid += outcome.vid;
      sum_pix += outcome.pixel;
      ++batches;
      ++global_step;
    }
    const auto t1 = std::chrono::steady_clock::now();
    log.loss.push_back(sum_total / static_cast<double>(batches));
    if (cfg.lambda_img > 0.0) log.loss_img.push_back(sum_img / static_cast<double>(batches));
    if (cfg.lambda_vid > 0.0) log.loss_vid.push_back(sum_vid / static_cast<double>(batches));
    if (cfg.pixel_branch) log.loss_pixel.push_back(sum_pix / static_cast<double>(batches));
    log.lr.push_back(last_lr);
    log.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }

  return DistillResult{std::move(student), std::move(log)};
}

DistillResult per_token_distill(const model::ModelConfig& student_cfg,
                                const model::TransformerModel& teacher,
                                const data::LabeledVideoSet& corpus, const DistillConfig& cfg) {
  check_student_corpus(student_cfg, corpus);
  if (!teacher.frozen) throw std::invalid_argument("teacher must be frozen");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("epochs and batch_size must be >= 1");
  if (!(cfg.base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
  if (!(cfg.smooth_l1_beta > 0.0)) throw std::invalid_argument("smooth_l1_beta must be positive");

  const data::NormStats stats = data::compute_norm_stats(corpus);
  const int total = student_cfg.layout.total();
  std::vector<nn::Mat> tokens(corpus.clips.size());
  std::vector<nn::Mat> targets(corpus.clips.size());
  for (std::size_t i = 0; i < corpus.clips.size(); ++i) {
    const data::ClipArray arr = data::normalize(corpus.clips[i], stats);
    tokens[i] = tok::patchify_video(arr, student_cfg.layout).vectors;
    targets[i] = teacher.config.modality == model::Modality::video
                     ? video_teacher_targets(arr, teacher)
                     : image_teacher_targets(arr, teacher, student_cfg.layout);
    apply_target_norm(targets[i], cfg.target_norm);
  }

  model::TransformerModel student = model::init_model(student_cfg, derive_seed(cfg.seed, "init", 0));
  // 2-layer projection head onto the teacher width.
  model::ParamStore proj;
  {
    Rng rng(derive_seed(cfg.seed, "proj", 0));
    nn::Mat w1(student_cfg.embed_dim, student_cfg.embed_dim);
    for (auto& x : w1.d) x = 0.02 * rng.normal();
    nn::Mat w2(student_cfg.embed_dim, teacher.config.embed_dim);
    for (auto& x : w2.d) x = 0.02 * rng.normal();
    proj.add("fc1.weight", std::move(w1));
    proj.add("fc1.bias", nn::Mat::zeros(1, student_cfg.embed_dim));
    proj.add("fc2.weight", std::move(w2));
    proj.add("fc2.bias", nn::Mat::zeros(1, teacher.config.embed_dim));
  }

  std::vector<train::NamedParam> params;
  for (const auto& name : student.store.names) params.push_back({"student." + name, student.store.get(name)});
  for (const auto& name : proj.names) params.push_back({"proj." + name, proj.get(name)});
  train::AdamW opt(train::AdamWConfig{cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  std::vector<int> all(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) all[static_cast<std::size_t>(i)] = i;

  const int n = static_cast<int>(tokens.size());
  const long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  train::Schedule sched{cfg.base_lr, cfg.warmup_fraction, steps_per_epoch * cfg.epochs};

  train::TrainLog log;
  long global_step = 0;
  std::vector<int> order(tokens.size());
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng(derive_seed(cfg.seed, "order", static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    double last_lr = 0.0;
    long batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      nn::Var batch_loss;
      for (int b = 0; b < bsz; ++b) {
        const int idx = order[static_cast<std::size_t>(start + b)];
        nn::Var feats = model::encode(student, tokens[static_cast<std::size_t>(idx)], all);
        nn::Var h = nn::gelu(nn::add_rowvec(nn::matmul(feats, proj.get("fc1.weight")), proj.get("fc1.bias")));
        nn::Var pred = nn::add_rowvec(nn::matmul(h, proj.get("fc2.weight")), proj.get("fc2.bias"));
        nn::Var loss = smooth_l1_feature_loss(pred, targets[static_cast<std::size_t>(idx)], all,
                                              cfg.smooth_l1_beta);
        batch_loss = batch_loss ? nn::add(batch_loss, loss) : loss;
      }
      batch_loss = nn::scale(batch_loss, 1.0 / bsz);
      nn::backward(batch_loss);
      last_lr = train::lr_at(sched, global_step);
      opt.step(params, last_lr);
      for (auto& p : params) p.var->zero_grad();
      epoch_loss += batch_loss->value.at(0, 0);
      ++batches;
      ++global_step;
    }
    const auto t1 = std::chrono::steady_clock::now();
    log.loss.push_back(epoch_loss / static_cast<double>(batches));
    log.lr.push_back(last_lr);
    log.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }

  return DistillResult{std::move(student), std::move(log)};
}

DistillResult ema_teacher_distill(const model::ModelConfig& student_cfg,
                                  const data::LabeledVideoSet& corpus, const DistillConfig& cfg,
                                  double momentum) {
  if (!(momentum > 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("momentum must be in (0,1)");
  }
  check_student_corpus(student_cfg, corpus);
  if (!(cfg.mask_ratio >= 0.0 && cfg.mask_ratio < 1.0)) {
    throw std::invalid_argument("mask_ratio must be in [0,1)");
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("epochs and batch_size must be >= 1");
  if (!(cfg.base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
  if (!(cfg.smooth_l1_beta > 0.0)) throw std::invalid_argument("smooth_l1_beta must be positive");

  const data::NormStats stats = data::compute_norm_stats(corpus);
  std::vector<nn::Mat> tokens(corpus.clips.size());
  for (std::size_t i = 0; i < corpus.clips.size(); ++i) {
    tokens[i] = tok::patchify_video(data::normalize(corpus.clips[i], stats), student_cfg.layout).vectors;
  }

  model::TransformerModel student = model::init_model(student_cfg, derive_seed(cfg.seed, "init", 0));
  model::TransformerModel ema = model::clone_model(student, /*trainable=*/false);

  model::DecoderConfig dcfg;
  dcfg.input_dim = student_cfg.embed_dim;
  dcfg.dim = student_cfg.decoder_dim;
  dcfg.depth = student_cfg.decoder_depth;
  dcfg.heads = student_cfg.heads;
  dcfg.mlp_ratio = student_cfg.mlp_ratio;
  dcfg.output_dim = student_cfg.embed_dim;
  dcfg.layout = student_cfg.layout;
  model::DecoderModel decoder = model::init_decoder(dcfg, derive_seed(cfg.seed, "decoder_ema", 0));

  std::vector<train::NamedParam> params;
  for (const auto& name : student.store.names) params.push_back({"student." + name, student.store.get(name)});
  for (const auto& name : decoder.store.names) params.push_back({"decoder." + name, decoder.store.get(name)});
  train::AdamW opt(train::AdamWConfig{cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  const int total = student_cfg.layout.total();
  std::vector<int> all(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) all[static_cast<std::size_t>(i)] = i;

  const int n = static_cast<int>(tokens.size());
  const long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  train::Schedule sched{cfg.base_lr, cfg.warmup_fraction, steps_per_epoch * cfg.epochs};

  train::TrainLog log;
  long global_step = 0;
  std::uint64_t mask_counter = 0;
  std::vector<int> order(tokens.size());
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng(derive_seed(cfg.seed, "order", static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    double last_lr = 0.0;
    long batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      nn::Var batch_loss;
      for (int b = 0; b < bsz; ++b) {
        const nn::Mat& toks = tokens[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
        const tok::TubeMask mask = tok::make_tube_mask(student_cfg.layout, cfg.mask_ratio,
                                                       derive_seed(cfg.seed, "mask", mask_counter++));
        tok::SplitTokens split = tok::split_visible(toks, mask);
        // Targets from the current EMA copy (fixed within the batch).
        nn::Mat target = model::encode(ema, toks, all)->value;
        apply_target_norm(target, cfg.target_norm);
        nn::Var feats = model::encode(student, split.visible, split.visible_idx);
        nn::Var pred = model::decode(decoder, feats, split.visible_idx, split.masked_idx);
        nn::Var loss = smooth_l1_feature_loss(pred, target, split.masked_idx, cfg.smooth_l1_beta);
        batch_loss = batch_loss ? nn::add(batch_loss, loss) : loss;
      }
      batch_loss = nn::scale(batch_loss, 1.0 / bsz);
      nn::backward(batch_loss);
      last_lr = train::lr_at(sched, global_step);
      opt.step(params, last_lr);
      for (auto& p : params) p.var->zero_grad();
      for (const auto& name : student.store.names) {
        nn::Mat& e = ema.store.get(name)->value;
        const nn::Mat& s = student.store.get(name)->value;
        for (std::size_t k = 0; k < e.d.size(); ++k) {
          e.d[k] = momentum * e.d[k] + (1.0 - momentum) * s.d[k];
        }
      }
      epoch_loss += batch_loss->value.at(0, 0);
      ++batches;
      ++global_step;
    }
    const auto t1 = std::chrono::steady_clock::now();
    log.loss.push_back(epoch_loss / static_cast<double>(batches));
    log.lr.push_back(last_lr);
    log.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }

  return DistillResult{std::move(student), std::move(log)};
}

}  // namespace mvd::distill
