#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>

#include "mvd/distill.hpp"
#include "mvd/rng.hpp"
#include "mvd/stage1.hpp"

using namespace mvd;
using namespace mvd::distill;

namespace {

const data::Geometry kGeo{4, 16, 16, 1};

model::ModelConfig tiny_config(model::Modality modality, int embed_dim = 16) {
  model::ModelConfig cfg;
  cfg.modality = modality;
  cfg.embed_dim = embed_dim;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.decoder_dim = 8;
  cfg.decoder_depth = 1;
  cfg.channels = 1;
  cfg.layout = modality == model::Modality::image
                   ? tok::image_layout_for(16, 16, 1, 4)
                   : tok::layout_for(kGeo, 2, 4);
  return cfg;
}

struct Teachers {
  model::TransformerModel img, vid;
  TeacherBundle bundle() const { return TeacherBundle{&img, &vid}; }
};

Teachers make_teachers(std::uint64_t seed) {
  Teachers t;
  t.img = model::init_model(tiny_config(model::Modality::image), derive_seed(seed, "ti", 0));
  t.vid = model::init_model(tiny_config(model::Modality::video, 24), derive_seed(seed, "tv", 0));
  model::freeze(t.img);
  model::freeze(t.vid);
  return t;
}

DistillConfig fast_distill(int epochs) {
  DistillConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.mask_ratio = 0.75;
  cfg.seed = 11;
  return cfg;
}

data::ClipArray normalized_clip(const data::LabeledVideoSet& set, int idx) {
  return data::normalize(set.clips[static_cast<std::size_t>(idx)],
                         data::compute_norm_stats(set));
}

}  // namespace

TEST_CASE("distill config validation") {
  const Teachers t = make_teachers(1);

  DistillConfig cfg = fast_distill(1);
  cfg.lambda_img = 0.0;
  cfg.lambda_vid = 0.0;
  CHECK_THROWS_AS(validate_distill_config(cfg, t.bundle()), std::invalid_argument);

  cfg = fast_distill(1);
  CHECK_THROWS_AS(validate_distill_config(cfg, TeacherBundle{}), std::invalid_argument);

  // lambda positive but that teacher missing
  cfg = fast_distill(1);
  TeacherBundle only_img{&t.img, nullptr};
  CHECK_THROWS_AS(validate_distill_config(cfg, only_img), std::invalid_argument);
  cfg.lambda_vid = 0.0;
  CHECK_NOTHROW(validate_distill_config(cfg, only_img));

  // unfrozen teacher
  model::TransformerModel thawed =
      model::init_model(tiny_config(model::Modality::image), 5);
  TeacherBundle raw{&thawed, nullptr};
  cfg = fast_distill(1);
  cfg.lambda_vid = 0.0;
  CHECK_THROWS_AS(validate_distill_config(cfg, raw), std::invalid_argument);

  cfg = fast_distill(1);
  cfg.smooth_l1_beta = 0.0;
  CHECK_THROWS_AS(validate_distill_config(cfg, t.bundle()), std::invalid_argument);
}

TEST_CASE("video teacher targets are the full-sequence features, mask-free") {
  const Teachers t = make_teachers(2);
  const auto set = data::gen_temporal_task(3, 2, kGeo, 2);
  const auto clip = normalized_clip(set, 0);
  const nn::Mat targets = video_teacher_targets(clip, t.vid);
  CHECK(targets.rows == t.vid.config.layout.total());
  CHECK(targets.cols == 24);

  // direct forward over all tokens reproduces the targets
  const auto patches = tok::patchify_video(clip, t.vid.config.layout);
  std::vector<int> all(static_cast<std::size_t>(t.vid.config.layout.total()));
  for (int i = 0; i < t.vid.config.layout.total(); ++i) all[static_cast<std::size_t>(i)] = i;
  const nn::Var direct = model::encode(t.vid, patches.vectors, all);
  CHECK(direct->value.d == targets.d);
}

TEST_CASE("image teacher targets follow the front-frame rule") {
  const Teachers t = make_teachers(3);
  const auto set = data::gen_temporal_task(4, 2, kGeo, 2);
  const auto clip = normalized_clip(set, 1);
  const auto video_layout = tok::layout_for(kGeo, 2, 4);
  const nn::Mat targets = image_teacher_targets(clip, t.img, video_layout);
  REQUIRE(targets.rows == video_layout.total());
  REQUIRE(targets.cols == 16);

  // frame tau*pt encoded alone must appear as the rows of time slice tau
  const auto img_layout = t.img.config.layout;
  for (int tau = 0; tau < video_layout.t_tokens; ++tau) {
    const int frame = tau * video_layout.pt;
    data::ClipArray one{1, clip.h, clip.w, clip.c, {}};
    one.v.assign(clip.v.begin() + static_cast<std::ptrdiff_t>(frame) * clip.h * clip.w * clip.c,
                 clip.v.begin() + static_cast<std::ptrdiff_t>(frame + 1) * clip.h * clip.w * clip.c);
    const auto patches = tok::patchify_image(one, img_layout);
    std::vector<int> all(static_cast<std::size_t>(img_layout.total()));
    for (int i = 0; i < img_layout.total(); ++i) all[static_cast<std::size_t>(i)] = i;
    const nn::Var feats = model::encode(t.img, patches.vectors, all);
    for (int s = 0; s < video_layout.spatial(); ++s) {
      for (long c = 0; c < 16; ++c) {
        CHECK(targets.at(tau * video_layout.spatial() + s, c) ==
              doctest::Approx(feats->value.at(s, c)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("target normalization standardizes rows; none is a no-op") {
  Rng rng(7);
  nn::Mat m(5, 8);
  for (auto& v : m.d) v = rng.normal() * 3.0 + 1.0;
  nn::Mat keep = m;
  apply_target_norm(keep, TargetNorm::none);
  CHECK(keep.d == m.d);

  nn::Mat ln = m;
  apply_target_norm(ln, TargetNorm::layernorm);
  for (long r = 0; r < 5; ++r) {
    double mean = 0.0, var = 0.0;
    for (long c = 0; c < 8; ++c) mean += m.at(r, c);
    mean /= 8.0;
    for (long c = 0; c < 8; ++c) {
      const double d = m.at(r, c) - mean;
      var += d * d;
    }
    var /= 8.0;
    for (long c = 0; c < 8; ++c) {
      const double expect = (m.at(r, c) - mean) / std::sqrt(var + 1e-6);
      CHECK(ln.at(r, c) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("feature loss equals the masked smooth-L1 oracle") {
  Rng rng(9);
  nn::Mat y(6, 4), t(6, 4);
  for (auto& v : y.d) v = rng.normal() * 2.0;
  for (auto& v : t.d) v = rng.normal() * 2.0;
  const std::vector<int> mask{0, 3, 4};
  const double beta = 0.7;
  double expect = 0.0;
  for (const int r : mask) {
    double row = 0.0;
    for (long c = 0; c < 4; ++c) {
      const double d = y.at(r, c) - t.at(r, c);
      const double a = std::abs(d);
      row += a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
    }
    expect += row / 4.0;
  }
  expect /= 3.0;
  const auto loss = smooth_l1_feature_loss(nn::leaf(y, false), t, mask, beta);
  CHECK(loss->value.at(0, 0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("decoders exist exactly for the active branches") {
  const Teachers t = make_teachers(4);
  const auto scfg = tiny_config(model::Modality::video);

  DistillConfig both = fast_distill(1);
  const auto d1 = init_student_decoders(scfg, t.bundle(), both, 3);
  CHECK(d1.img != nullptr);
  CHECK(d1.vid != nullptr);
  CHECK(d1.pix == nullptr);
  CHECK(d1.img->config.output_dim == 16);
  CHECK(d1.vid->config.output_dim == 24);

  DistillConfig vid_only = fast_distill(1);
  vid_only.lambda_img = 0.0;
  const auto d2 = init_student_decoders(scfg, t.bundle(), vid_only, 3);
  CHECK(d2.img == nullptr);
  CHECK(d2.vid != nullptr);

  DistillConfig with_pixel = fast_distill(1);
  with_pixel.pixel_branch = true;
  const auto d3 = init_student_decoders(scfg, t.bundle(), with_pixel, 3);
  CHECK(d3.pix != nullptr);
  CHECK(d3.pix->config.output_dim == scfg.patch_dim());
}

TEST_CASE("total loss is linear in the lambda weights at fixed state") {
  const Teachers t = make_teachers(5);
  const auto set = data::gen_temporal_task(6, 4, kGeo, 2);
  const auto scfg = tiny_config(model::Modality::video);
  const auto student = model::init_model(scfg, 77);

  const auto stats = data::compute_norm_stats(set);
  std::vector<nn::Mat> tokens, img_t, vid_t;
  std::vector<DistillBatchItem> batch;
  for (int i = 0; i < 2; ++i) {
    const auto arr = data::normalize(set.clips[static_cast<std::size_t>(i)], stats);
    tokens.push_back(tok::patchify_video(arr, scfg.layout).vectors);
    img_t.push_back(image_teacher_targets(arr, t.img, scfg.layout));
    vid_t.push_back(video_teacher_targets(arr, t.vid));
  }
  for (int i = 0; i < 2; ++i) {
    DistillBatchItem item;
    item.tokens = &tokens[static_cast<std::size_t>(i)];
    item.img_targets = &img_t[static_cast<std::size_t>(i)];
    item.vid_targets = &vid_t[static_cast<std::size_t>(i)];
    item.mask = tok::make_tube_mask(scfg.layout, 0.75, 100 + static_cast<std::uint64_t>(i));
    batch.push_back(item);
  }

  DistillConfig cfg = fast_distill(1);
  const auto decoders = init_student_decoders(scfg, t.bundle(), cfg, 9);

  auto total_at = [&](double l1, double l2) {
    DistillConfig c = cfg;
    c.lambda_img = l1;
    c.lambda_vid = l2;
    const LossParts parts = mvd_loss(student, decoders, batch, c);
    return std::tuple{parts.total->value.at(0, 0), parts.img->value.at(0, 0),
                      parts.vid->value.at(0, 0)};
  };

  const auto [t11, i11, v11] = total_at(1.0, 1.0);
  CHECK(t11 == doctest::Approx(i11 + v11).epsilon(1e-12));

  // component losses do not depend on the lambdas; totals combine them linearly
  for (const auto [l1, l2] : {std::pair{0.3, 1.7}, std::pair{2.0, 0.25}, std::pair{5.0, 3.0}}) {
    const auto [tt, ii, vv] = total_at(l1, l2);
    CHECK(ii == doctest::Approx(i11).epsilon(1e-12));
    CHECK(vv == doctest::Approx(v11).epsilon(1e-12));
    CHECK(tt == doctest::Approx(l1 * i11 + l2 * v11).epsilon(1e-9));
  }
}

TEST_CASE("a zero lambda reduces step-for-step to the single-teacher run") {
  const Teachers t = make_teachers(6);
  const auto set = data::gen_temporal_task(8, 6, kGeo, 2);
  const auto scfg = tiny_config(model::Modality::video);

  DistillConfig cfg = fast_distill(2);
  cfg.lambda_img = 1.0;
  cfg.lambda_vid = 0.0;
  const auto with_both_present = mvd::distill::distill(scfg, t.bundle(), set, cfg);

  TeacherBundle img_only{&t.img, nullptr};
  const auto img_alone = mvd::distill::distill(scfg, img_only, set, cfg);
  CHECK(model::param_hash(with_both_present.student) == model::param_hash(img_alone.student));
  CHECK(with_both_present.log.loss == img_alone.log.loss);

  // and symmetrically for the video side
  DistillConfig vcfg = fast_distill(2);
  vcfg.lambda_img = 0.0;
  const auto vid_both = mvd::distill::distill(scfg, t.bundle(), set, vcfg);
  TeacherBundle vid_only{nullptr, &t.vid};
  const auto vid_alone = mvd::distill::distill(scfg, vid_only, set, vcfg);
  CHECK(model::param_hash(vid_both.student) == model::param_hash(vid_alone.student));
}

TEST_CASE("teachers are untouched by a distillation run") {
  const Teachers t = make_teachers(7);
  const std::string img_before = model::param_hash(t.img);
  const std::string vid_before = model::param_hash(t.vid);
  const auto set = data::gen_temporal_task(9, 6, kGeo, 2);
  const auto res = mvd::distill::distill(tiny_config(model::Modality::video), t.bundle(), set, fast_distill(2));
  CHECK(model::param_hash(t.img) == img_before);
  CHECK(model::param_hash(t.vid) == vid_before);
  CHECK(model::param_hash(res.student) != vid_before);
}

TEST_CASE("distillation is deterministic and seed-sensitive") {
  const Teachers t = make_teachers(8);
  const auto set = data::gen_temporal_task(10, 6, kGeo, 2);
  const auto scfg = tiny_config(model::Modality::video);
  const DistillConfig cfg = fast_distill(2);
  const auto a = mvd::distill::distill(scfg, t.bundle(), set, cfg);
  const auto b = mvd::distill::distill(scfg, t.bundle(), set, cfg);
  CHECK(model::param_hash(a.student) == model::param_hash(b.student));
  CHECK(a.log.loss == b.log.loss);
  DistillConfig other = cfg;
  other.seed = 12345;
  const auto c = mvd::distill::distill(scfg, t.bundle(), set, other);
  CHECK(model::param_hash(a.student) != model::param_hash(c.student));
}

TEST_CASE("stage-2 log records the active component columns") {
  const Teachers t = make_teachers(12);
  const auto set = data::gen_temporal_task(13, 4, kGeo, 2);
  const auto scfg = tiny_config(model::Modality::video);

  const auto both = mvd::distill::distill(scfg, t.bundle(), set, fast_distill(1));
  CHECK(both.log.loss_img.size() == 1);
  CHECK(both.log.loss_vid.size() == 1);
  CHECK(both.log.loss_pixel.empty());
  CHECK(both.log.loss[0] ==
        doctest::Approx(both.log.loss_img[0] + both.log.loss_vid[0]).epsilon(1e-9));

  DistillConfig pcfg = fast_distill(1);
  pcfg.pixel_branch = true;
  const auto with_pix = mvd::distill::distill(scfg, t.bundle(), set, pcfg);
  CHECK(with_pix.log.loss_pixel.size() == 1);
}

TEST_CASE("pixel branch changes the trained student") {
  const Teachers t = make_teachers(13);
  const auto set = data::gen_temporal_task(14, 4, kGeo, 2);
  const auto scfg = tiny_config(model::Modality::video);
  const auto plain = mvd::distill::distill(scfg, t.bundle(), set, fast_distill(1));
  DistillConfig pcfg = fast_distill(1);
  pcfg.pixel_branch = true;
  const auto with_pix = mvd::distill::distill(scfg, t.bundle(), set, pcfg);
  CHECK(model::param_hash(plain.student) != model::param_hash(with_pix.student));
}

TEST_CASE("per-token baseline trains on full sequences and is reproducible") {
  const Teachers t = make_teachers(9);
  const auto set = data::gen_temporal_task(11, 4, kGeo, 2);
  const auto scfg = tiny_config(model::Modality::video);
  DistillConfig cfg = fast_distill(2);
  cfg.lambda_img = 0.0;  // single teacher
  const auto a = per_token_distill(scfg, t.vid, set, cfg);
  const auto b = per_token_distill(scfg, t.vid, set, cfg);
  CHECK(model::param_hash(a.student) == model::param_hash(b.student));
  REQUIRE(a.log.loss.size() == 2);
  for (double l : a.log.loss) CHECK(std::isfinite(l));
  // its trajectory differs from masked distillation
  TeacherBundle vid_only{nullptr, &t.vid};
  DistillConfig mcfg = fast_distill(2);
  mcfg.lambda_img = 0.0;
  const auto masked = mvd::distill::distill(scfg, vid_only, set, mcfg);
  CHECK(model::param_hash(a.student) != model::param_hash(masked.student));
}

TEST_CASE("ema baseline validates momentum and reproduces deterministically") {
  const auto set = data::gen_temporal_task(12, 4, kGeo, 2);
  const auto scfg = tiny_config(model::Modality::video);
  const DistillConfig cfg = fast_distill(2);
  CHECK_THROWS_AS(ema_teacher_distill(scfg, set, cfg, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(ema_teacher_distill(scfg, set, cfg, 1.0), std::invalid_argument);
  const auto a = ema_teacher_distill(scfg, set, cfg, 0.95);
  const auto b = ema_teacher_distill(scfg, set, cfg, 0.95);
  CHECK(model::param_hash(a.student) == model::param_hash(b.student));
  const auto c = ema_teacher_distill(scfg, set, cfg, 0.5);
  CHECK(model::param_hash(a.student) != model::param_hash(c.student));
}
