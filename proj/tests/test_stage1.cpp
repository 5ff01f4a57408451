#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mvd/rng.hpp"
#include "mvd/stage1.hpp"

using namespace mvd;
using namespace mvd::train;

namespace {

const data::Geometry kGeo{4, 16, 16, 1};

model::ModelConfig tiny_config(model::Modality modality) {
  model::ModelConfig cfg;
  cfg.modality = modality;
  cfg.embed_dim = 16;
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

PretrainConfig fast_pretrain(int epochs) {
  PretrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.mask_ratio = 0.75;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("pretrain config validation") {
  PretrainConfig cfg;
  cfg.mask_ratio = 1.0;
  CHECK_THROWS_AS(validate_pretrain_config(cfg), std::invalid_argument);
  cfg = PretrainConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_AS(validate_pretrain_config(cfg), std::invalid_argument);
  cfg = PretrainConfig{};
  cfg.base_lr = 0.0;
  CHECK_THROWS_AS(validate_pretrain_config(cfg), std::invalid_argument);
  cfg = PretrainConfig{};
  cfg.warmup_fraction = 1.5;
  CHECK_THROWS_AS(validate_pretrain_config(cfg), std::invalid_argument);
  CHECK_NOTHROW(validate_pretrain_config(PretrainConfig{}));
}

TEST_CASE("pixel reconstruction loss equals a scalar loop over masked tokens") {
  Rng rng(5);
  const auto layout = tok::layout_for(kGeo, 2, 4);
  data::ClipArray clip{4, 16, 16, 1, {}};
  clip.v.resize(4 * 16 * 16);
  for (auto& v : clip.v) v = rng.normal();
  const auto targets = tok::normalize_patches(tok::patchify_video(clip, layout));

  nn::Mat y(layout.total(), layout.patch_dim(1));
  for (auto& v : y.d) v = rng.normal();
  const std::vector<int> mask_rows{1, 5, 8, 20, 31};

  double expect = 0.0;
  for (const int r : mask_rows) {
    double row = 0.0;
    for (long c = 0; c < y.cols; ++c) {
      const double d = y.at(r, c) - targets.vectors.at(r, c);
      row += d * d;
    }
    expect += row / static_cast<double>(y.cols);
  }
  expect /= static_cast<double>(mask_rows.size());

  const auto loss = pixel_recon_loss(nn::leaf(y, false), targets, mask_rows);
  CHECK(loss->value.at(0, 0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("image pretraining runs, logs, and is reproducible") {
  const auto corpus = data::gen_spatial_task(1, 6, kGeo, 3);
  const auto cfg = tiny_config(model::Modality::image);
  const auto pcfg = fast_pretrain(2);

  const auto a = pretrain_image_teacher(corpus, cfg, pcfg);
  const auto b = pretrain_image_teacher(corpus, cfg, pcfg);
  CHECK(model::param_hash(a.encoder) == model::param_hash(b.encoder));
  CHECK(a.log.loss == b.log.loss);
  REQUIRE(a.log.loss.size() == 2);
  REQUIRE(a.log.lr.size() == 2);
  for (double l : a.log.loss) CHECK(std::isfinite(l));
  CHECK(a.encoder.config.modality == model::Modality::image);

  PretrainConfig other = pcfg;
  other.seed = 99;
  const auto c = pretrain_image_teacher(corpus, cfg, other);
  CHECK(model::param_hash(a.encoder) != model::param_hash(c.encoder));
}

TEST_CASE("video pretraining decreases the reconstruction loss") {
  const auto corpus = data::gen_temporal_task(2, 8, kGeo, 2);
  const auto cfg = tiny_config(model::Modality::video);
  PretrainConfig pcfg = fast_pretrain(12);
  pcfg.base_lr = 5e-4;
  const auto res = pretrain_video_teacher(corpus, cfg, pcfg);
  REQUIRE(res.log.loss.size() == 12);
  // fresh masks each epoch make single epochs noisy; compare 3-epoch means
  const auto mean3 = [&](std::size_t from) {
    return (res.log.loss[from] + res.log.loss[from + 1] + res.log.loss[from + 2]) / 3.0;
  };
  CHECK(mean3(9) < mean3(0));
}

TEST_CASE("logged lr equals the schedule value at the last step of each epoch") {
  const auto corpus = data::gen_temporal_task(4, 6, kGeo, 2);
  const auto cfg = tiny_config(model::Modality::video);
  PretrainConfig pcfg = fast_pretrain(3);
  pcfg.batch_size = 2;  // 3 steps per epoch
  const auto res = pretrain_video_teacher(corpus, cfg, pcfg);
  Schedule s;
  s.base_lr = pcfg.base_lr;
  s.warmup_fraction = pcfg.warmup_fraction;
  s.total_steps = 9;
  for (int e = 0; e < 3; ++e) {
    CHECK(res.log.lr[static_cast<std::size_t>(e)] ==
          doctest::Approx(lr_at(s, e * 3 + 2)).epsilon(1e-12));
  }
}

TEST_CASE("modality and geometry mismatches are rejected") {
  const auto corpus = data::gen_spatial_task(1, 4, kGeo, 3);
  // video-modality model passed to the image trainer
  CHECK_THROWS_AS(
      pretrain_image_teacher(corpus, tiny_config(model::Modality::video), fast_pretrain(1)),
      std::invalid_argument);
  // image-modality model passed to the video trainer
  CHECK_THROWS_AS(
      pretrain_video_teacher(corpus, tiny_config(model::Modality::image), fast_pretrain(1)),
      std::invalid_argument);
  // layout that does not match the corpus frames
  auto wrong = tiny_config(model::Modality::video);
  wrong.layout = tok::layout_for(data::Geometry{8, 16, 16, 1}, 2, 4);
  CHECK_THROWS_AS(pretrain_video_teacher(corpus, wrong, fast_pretrain(1)),
                  std::invalid_argument);
}

TEST_CASE("normalized and raw pixel targets differ in the trained result") {
  const auto corpus = data::gen_temporal_task(6, 4, kGeo, 2);
  const auto cfg = tiny_config(model::Modality::video);
  PretrainConfig norm = fast_pretrain(1);
  PretrainConfig raw = norm;
  raw.normalize_targets = false;
  const auto a = pretrain_video_teacher(corpus, cfg, norm);
  const auto b = pretrain_video_teacher(corpus, cfg, raw);
  CHECK(model::param_hash(a.encoder) != model::param_hash(b.encoder));
}

TEST_CASE("empty corpus is rejected") {
  data::LabeledVideoSet empty;
  empty.class_count = 2;
  CHECK_THROWS(pretrain_video_teacher(empty, tiny_config(model::Modality::video),
                                      fast_pretrain(1)));
}
