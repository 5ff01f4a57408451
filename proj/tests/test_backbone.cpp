#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "mvd/backbone.hpp"
#include "mvd/rng.hpp"

using namespace mvd;
using namespace mvd::model;
using nn::Mat;
using nn::Var;

namespace {

ModelConfig small_video_config() {
  ModelConfig cfg;
  cfg.modality = Modality::video;
  cfg.embed_dim = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.decoder_dim = 8;
  cfg.decoder_depth = 1;
  cfg.channels = 1;
  cfg.layout = tok::layout_for(data::Geometry{4, 16, 16, 1}, 2, 4);  // 2x4x4 = 32 tokens
  return cfg;
}

Mat random_tokens(std::uint64_t seed, long rows, long cols) {
  Mat m(rows, cols);
  Rng rng(seed);
  for (auto& x : m.d) x = rng.normal();
  return m;
}

std::vector<int> iota_idx(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

namespace fs = std::filesystem;
fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("mvd_backbone_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("config validation rejects inconsistent settings") {
  ModelConfig cfg = small_video_config();
  cfg.embed_dim = 15;  // odd, and not divisible by heads
  CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
  cfg = small_video_config();
  cfg.channels = 2;
  CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
  cfg = small_video_config();
  cfg.modality = Modality::image;  // but layout has 2 time slices
  CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
}

TEST_CASE("positional embedding geometry and determinism") {
  const auto layout = tok::layout_for(data::Geometry{4, 16, 16, 1}, 2, 4);
  const Mat pe = sincos_pos_embed(layout, 16, Modality::video);
  CHECK(pe.rows == 32);
  CHECK(pe.cols == 16);
  const Mat pe2 = sincos_pos_embed(layout, 16, Modality::video);
  CHECK(pe.d == pe2.d);
  for (double v : pe.d) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("positional embedding distinguishes every grid position") {
  const auto layout = tok::layout_for(data::Geometry{8, 32, 32, 1}, 2, 4);  // 4x8x8
  const Mat pe = sincos_pos_embed(layout, 32, Modality::video);
  std::set<std::vector<double>> rows;
  for (long r = 0; r < pe.rows; ++r) {
    std::vector<double> row(pe.d.begin() + r * pe.cols, pe.d.begin() + (r + 1) * pe.cols);
    rows.insert(std::move(row));
  }
  CHECK(rows.size() == static_cast<std::size_t>(pe.rows));
}

TEST_CASE("video embedding separates time from space") {
  const auto layout = tok::layout_for(data::Geometry{8, 16, 16, 1}, 2, 4);  // 4x4x4
  const Mat pe = sincos_pos_embed(layout, 16, Modality::video);
  // same spatial cell at different times shares the spatial block of columns
  // d_t = max(2, even_floor(16/4)) = 4; spatial columns are [4, 16)
  const int s = layout.spatial();
  for (int tau = 1; tau < layout.t_tokens; ++tau) {
    for (long c = 4; c < 16; ++c) {
      CHECK(pe.at(tau * s + 3, c) == pe.at(3, c));
    }
    // and the time block differs from time 0
    bool any_diff = false;
    for (long c = 0; c < 4; ++c) {
      if (pe.at(tau * s + 3, c) != pe.at(3, c)) any_diff = true;
    }
    CHECK(any_diff);
  }
}

TEST_CASE("init enumerates the documented tensors with gamma=1 and zero biases") {
  const ModelConfig cfg = small_video_config();
  const TransformerModel m = init_model(cfg, 7);
  CHECK(m.store.has("patch_embed.weight"));
  CHECK(m.store.has("patch_embed.bias"));
  CHECK(m.store.has("blocks.0.attn.qkv.weight"));
  CHECK(m.store.has("blocks.1.mlp.fc2.bias"));
  CHECK(m.store.has("norm.gamma"));
  CHECK(!m.store.has("blocks.2.norm1.gamma"));

  const Var& g = m.store.get("blocks.0.norm1.gamma");
  for (double v : g->value.d) CHECK(v == 1.0);
  const Var& b = m.store.get("patch_embed.bias");
  for (double v : b->value.d) CHECK(v == 0.0);

  const Var& qkv = m.store.get("blocks.0.attn.qkv.weight");
  CHECK(qkv->value.rows == 16);
  CHECK(qkv->value.cols == 48);
  const Var& pw = m.store.get("patch_embed.weight");
  CHECK(pw->value.rows == cfg.patch_dim());
  CHECK(pw->value.cols == 16);
  // init scale 0.02: sample std should sit well below 0.1
  double ss = 0.0;
  for (double v : pw->value.d) ss += v * v;
  CHECK(std::sqrt(ss / static_cast<double>(pw->value.size())) < 0.05);
}

TEST_CASE("init is deterministic per seed and name-keyed") {
  const ModelConfig cfg = small_video_config();
  const TransformerModel a = init_model(cfg, 7);
  const TransformerModel b = init_model(cfg, 7);
  const TransformerModel c = init_model(cfg, 8);
  CHECK(param_hash(a) == param_hash(b));
  CHECK(param_hash(a) != param_hash(c));
}

TEST_CASE("encode output shape follows the visible set") {
  const ModelConfig cfg = small_video_config();
  const TransformerModel m = init_model(cfg, 1);
  const auto mask = tok::make_tube_mask(cfg.layout, 0.75, 5);
  const auto vis = mask.visible_indices();
  const Mat tokens = random_tokens(2, static_cast<long>(vis.size()), cfg.patch_dim());
  const Var out = encode(m, tokens, vis);
  CHECK(out->value.rows == static_cast<long>(vis.size()));
  CHECK(out->value.cols == 16);
}

TEST_CASE("encode forward matches an independent plain-loop transformer") {
  const ModelConfig cfg = small_video_config();
  const TransformerModel m = init_model(cfg, 3);
  const int n = cfg.layout.total();
  const Mat tokens = random_tokens(4, n, cfg.patch_dim());
  const Var out = encode(m, tokens, iota_idx(n));

  // reference forward with plain loops, no autograd
  const auto& P = m.store;
  auto mat = [&](const char* name) -> const Mat& { return P.get(name)->value; };
  const int D = cfg.embed_dim;
  const int H = cfg.heads;
  const int dh = D / H;

  // patch embedding + positions
  Mat x(n, D);
  {
    const Mat& w = mat("patch_embed.weight");
    const Mat& b = mat("patch_embed.bias");
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < D; ++j) {
        double s = b.at(0, j);
        for (long k = 0; k < tokens.cols; ++k) s += tokens.at(r, k) * w.at(k, j);
        x.at(r, j) = s + m.pos_embed.at(r, j);
      }
  }

  auto layernorm_ref = [&](const Mat& in, const Mat& gamma, const Mat& beta) {
    Mat out2(in.rows, in.cols);
    for (long r = 0; r < in.rows; ++r) {
      double mean = 0.0;
      for (long c = 0; c < in.cols; ++c) mean += in.at(r, c);
      mean /= static_cast<double>(in.cols);
      double var = 0.0;
      for (long c = 0; c < in.cols; ++c) {
        const double d = in.at(r, c) - mean;
        var += d * d;
      }
      var /= static_cast<double>(in.cols);
      const double inv = 1.0 / std::sqrt(var + 1e-6);
      for (long c = 0; c < in.cols; ++c)
        out2.at(r, c) = (in.at(r, c) - mean) * inv * gamma.at(0, c) + beta.at(0, c);
    }
    return out2;
  };

  for (int blk = 0; blk < cfg.depth; ++blk) {
    const std::string p = "blocks." + std::to_string(blk) + ".";
    const Mat h1 = layernorm_ref(x, P.get(p + "norm1.gamma")->value, P.get(p + "norm1.beta")->value);
    // qkv projection
    const Mat& wqkv = P.get(p + "attn.qkv.weight")->value;
    const Mat& bqkv = P.get(p + "attn.qkv.bias")->value;
    Mat qkv(n, 3 * D);
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < 3 * D; ++j) {
        double s = bqkv.at(0, j);
        for (int k = 0; k < D; ++k) s += h1.at(r, k) * wqkv.at(k, j);
        qkv.at(r, j) = s;
      }
    // attention per head
    Mat att_out(n, D);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int head = 0; head < H; ++head) {
      const int q0 = head * dh, k0 = D + head * dh, v0 = 2 * D + head * dh;
      for (int i = 0; i < n; ++i) {
        std::vector<double> logits(static_cast<std::size_t>(n));
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int d = 0; d < dh; ++d) s += qkv.at(i, q0 + d) * qkv.at(j, k0 + d);
          logits[static_cast<std::size_t>(j)] = s * scale;
          mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
          logits[static_cast<std::size_t>(j)] = std::exp(logits[static_cast<std::size_t>(j)] - mx);
          z += logits[static_cast<std::size_t>(j)];
        }
        for (int d = 0; d < dh; ++d) {
          double s = 0.0;
          for (int j = 0; j < n; ++j) s += logits[static_cast<std::size_t>(j)] / z * qkv.at(j, v0 + d);
          att_out.at(i, head * dh + d) = s;
        }
      }
    }
    // output projection + residual
    const Mat& wproj = P.get(p + "attn.proj.weight")->value;
    const Mat& bproj = P.get(p + "attn.proj.bias")->value;
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < D; ++j) {
        double s = bproj.at(0, j);
        for (int k = 0; k < D; ++k) s += att_out.at(r, k) * wproj.at(k, j);
        x.at(r, j) += s;
      }
    // mlp with gelu
    const Mat h2 = layernorm_ref(x, P.get(p + "norm2.gamma")->value, P.get(p + "norm2.beta")->value);
    const Mat& w1 = P.get(p + "mlp.fc1.weight")->value;
    const Mat& b1 = P.get(p + "mlp.fc1.bias")->value;
    const Mat& w2 = P.get(p + "mlp.fc2.weight")->value;
    const Mat& b2 = P.get(p + "mlp.fc2.bias")->value;
    const int hidden = D * cfg.mlp_ratio;
    Mat mid(n, hidden);
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < hidden; ++j) {
        double s = b1.at(0, j);
        for (int k = 0; k < D; ++k) s += h2.at(r, k) * w1.at(k, j);
        mid.at(r, j) = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
      }
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < D; ++j) {
        double s = b2.at(0, j);
        for (int k = 0; k < hidden; ++k) s += mid.at(r, k) * w2.at(k, j);
        x.at(r, j) += s;
      }
  }
  const Mat ref = layernorm_ref(x, P.get("norm.gamma")->value, P.get("norm.beta")->value);

  REQUIRE(out->value.rows == ref.rows);
  for (long r = 0; r < ref.rows; ++r)
    for (long c = 0; c < ref.cols; ++c)
      CHECK(out->value.at(r, c) == doctest::Approx(ref.at(r, c)).epsilon(1e-9));
}

TEST_CASE("gradients flow to every encoder parameter through encode") {
  const ModelConfig cfg = small_video_config();
  TransformerModel m = init_model(cfg, 9);
  const auto mask = tok::make_tube_mask(cfg.layout, 0.5, 4);
  const auto vis = mask.visible_indices();
  const Mat tokens = random_tokens(11, static_cast<long>(vis.size()), cfg.patch_dim());
  const Var out = encode(m, tokens, vis);
  nn::backward(nn::mean_all(out));
  for (const auto& name : m.store.names) {
    const Var& p = m.store.get(name);
    REQUIRE(p->requires_grad);
    double g = 0.0;
    for (double v : p->grad.d) g += std::abs(v);
    CHECK_MESSAGE(g > 0.0, name, " received no gradient");
  }
}

TEST_CASE("encoder+decoder gradients match finite differences on a few coordinates") {
  ModelConfig cfg = small_video_config();
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.depth = 1;
  TransformerModel m = init_model(cfg, 13);
  DecoderConfig dcfg;
  dcfg.input_dim = 8;
  dcfg.dim = 8;
  dcfg.depth = 1;
  dcfg.heads = 2;
  dcfg.mlp_ratio = 2;
  dcfg.output_dim = cfg.patch_dim();
  dcfg.layout = cfg.layout;
  DecoderModel dec = init_decoder(dcfg, 14);

  const auto mask = tok::make_tube_mask(cfg.layout, 0.75, 3);
  const auto vis = mask.visible_indices();
  const auto msk = mask.masked_indices();
  const Mat tokens = random_tokens(15, static_cast<long>(vis.size()), cfg.patch_dim());
  const Mat targets = random_tokens(16, cfg.layout.total(), cfg.patch_dim());

  auto loss_fn = [&]() {
    const Var feats = encode(m, tokens, vis);
    const Var y = decode(dec, feats, vis, msk);
    return nn::mse_masked(y, nn::constant(targets), msk);
  };
  Var loss = loss_fn();
  nn::backward(loss);

  // probe a handful of coordinates in assorted tensors of both nets
  struct Probe {
    ParamStore* store;
    const char* name;
    std::size_t entry;
  };
  std::vector<Probe> probes = {
      {&m.store, "patch_embed.weight", 5},
      {&m.store, "blocks.0.attn.qkv.weight", 40},
      {&m.store, "blocks.0.mlp.fc1.weight", 3},
      {&m.store, "norm.gamma", 2},
      {&dec.store, "embed.weight", 11},
      {&dec.store, "mask_token", 4},
      {&dec.store, "blocks.0.attn.proj.weight", 9},
      {&dec.store, "head.weight", 21},
  };
  const double h = 1e-5;
  for (const auto& pr : probes) {
    Var p = pr.store->get(pr.name);
    const double saved = p->value.d[pr.entry];
    const double ana = p->grad.d[pr.entry];
    p->value.d[pr.entry] = saved + h;
    const double up = loss_fn()->value.at(0, 0);
    p->value.d[pr.entry] = saved - h;
    const double dn = loss_fn()->value.at(0, 0);
    p->value.d[pr.entry] = saved;
    const double num = (up - dn) / (2.0 * h);
    // floor absorbs central-difference cancellation noise (~1e-11 at h=1e-5)
    const double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
    CHECK_MESSAGE(std::abs(num - ana) / denom < 1e-4, pr.name, "[", pr.entry, "] fd=", num,
                  " grad=", ana);
  }
}

TEST_CASE("decode fills masked slots from the mask token") {
  const ModelConfig cfg = small_video_config();
  const TransformerModel m = init_model(cfg, 21);
  DecoderConfig dcfg;
  dcfg.input_dim = cfg.embed_dim;
  dcfg.dim = 8;
  dcfg.depth = 1;
  dcfg.heads = 2;
  dcfg.mlp_ratio = 2;
  dcfg.output_dim = cfg.patch_dim();
  dcfg.layout = cfg.layout;
  const DecoderModel dec = init_decoder(dcfg, 22);
  const auto mask = tok::make_tube_mask(cfg.layout, 0.75, 8);
  const auto vis = mask.visible_indices();
  const Mat tokens = random_tokens(23, static_cast<long>(vis.size()), cfg.patch_dim());
  const Var feats = encode(m, tokens, vis);
  const Var y = decode(dec, feats, vis, mask.masked_indices());
  CHECK(y->value.rows == cfg.layout.total());
  CHECK(y->value.cols == cfg.patch_dim());
}

TEST_CASE("freeze stops gradients and clone_model restores them") {
  const ModelConfig cfg = small_video_config();
  TransformerModel m = init_model(cfg, 31);
  freeze(m);
  CHECK(m.frozen);
  for (const auto& name : m.store.names) CHECK(!m.store.get(name)->requires_grad);

  const TransformerModel c = clone_model(m, true);
  CHECK(!c.frozen);
  CHECK(param_hash(c) == param_hash(m));
  for (const auto& name : c.store.names) CHECK(c.store.get(name)->requires_grad);
  // clones are deep: mutating the clone leaves the original untouched
  TransformerModel c2 = clone_model(m, true);
  c2.store.get("patch_embed.weight")->value.at(0, 0) += 1.0;
  CHECK(param_hash(c2) != param_hash(m));
  CHECK(param_hash(c) == param_hash(m));
}

TEST_CASE("param_hash reflects values, names, and shapes") {
  const ModelConfig cfg = small_video_config();
  TransformerModel a = init_model(cfg, 41);
  TransformerModel b = clone_model(a, true);
  CHECK(param_hash(a) == param_hash(b));
  b.store.get("norm.beta")->value.at(0, 0) = 1e-3;
  CHECK(param_hash(a) != param_hash(b));
  // f32 quantization boundary: a change below f32 resolution hashes the same
  TransformerModel c = clone_model(a, true);
  c.store.get("norm.gamma")->value.at(0, 0) += 1e-12;
  CHECK(param_hash(a) == param_hash(c));
}

TEST_CASE("checkpoint round-trip preserves config, values, and hash") {
  const auto dir = temp_dir("roundtrip");
  const ModelConfig cfg = small_video_config();
  TransformerModel m = init_model(cfg, 55);
  m.store.get("patch_embed.weight")->value.at(1, 2) = 0.123456789;
  save_checkpoint(m, dir.string());
  const TransformerModel back = load_checkpoint(dir.string());
  CHECK(back.config.embed_dim == 16);
  CHECK(back.config.depth == 2);
  CHECK(back.config.modality == Modality::video);
  CHECK(back.config.layout.t_tokens == 2);
  CHECK(param_hash(back) == param_hash(m));
  CHECK(!back.frozen);
  CHECK(back.pos_embed.d == m.pos_embed.d);
}

TEST_CASE("frozen flag survives the checkpoint") {
  const auto dir = temp_dir("frozen");
  const ModelConfig cfg = small_video_config();
  TransformerModel m = init_model(cfg, 56);
  freeze(m);
  save_checkpoint(m, dir.string());
  const TransformerModel back = load_checkpoint(dir.string());
  CHECK(back.frozen);
  for (const auto& name : back.store.names) CHECK(!back.store.get(name)->requires_grad);
}

TEST_CASE("checkpoint writes are byte-identical across saves") {
  const auto d1 = temp_dir("bytes1");
  const auto d2 = temp_dir("bytes2");
  const ModelConfig cfg = small_video_config();
  const TransformerModel m = init_model(cfg, 57);
  save_checkpoint(m, d1.string());
  save_checkpoint(m, d2.string());
  for (const char* rel : {"config.txt", "params/index.txt", "params/patch_embed.weight.f32",
                          "params/blocks.1.attn.qkv.weight.f32"}) {
    std::ifstream a(d1 / rel, std::ios::binary), b(d2 / rel, std::ios::binary);
    const std::string sa(std::istreambuf_iterator<char>(a), {});
    const std::string sb(std::istreambuf_iterator<char>(b), {});
    REQUIRE(!sa.empty());
    CHECK(sa == sb);
  }
}

TEST_CASE("corrupt checkpoints are rejected with CheckpointError") {
  const auto dir = temp_dir("corrupt");
  const ModelConfig cfg = small_video_config();
  save_checkpoint(init_model(cfg, 58), dir.string());

  SUBCASE("missing tensor file") {
    fs::remove(dir / "params" / "norm.gamma.f32");
    CHECK_THROWS_AS(load_checkpoint(dir.string()), CheckpointError);
  }
  SUBCASE("truncated tensor file") {
    fs::resize_file(dir / "params" / "patch_embed.weight.f32", 12);
    CHECK_THROWS_AS(load_checkpoint(dir.string()), CheckpointError);
  }
  SUBCASE("unknown config key") {
    std::ofstream(dir / "config.txt", std::ios::app) << "mystery=1\n";
    CHECK_THROWS_AS(load_checkpoint(dir.string()), CheckpointError);
  }
  SUBCASE("missing directory") {
    CHECK_THROWS_AS(load_checkpoint((dir / "nope").string()), CheckpointError);
  }
}
