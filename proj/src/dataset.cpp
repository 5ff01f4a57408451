#include "mvd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mvd/rng.hpp"
#include "mvd/threading.hpp"

namespace mvd::data {

namespace fs = std::filesystem;

namespace {

// Quantize through f32 so every stored pixel survives the f32 disk format.
double q32(double v) { return static_cast<double>(static_cast<float>(v)); }

void check_geometry(const Geometry& g, int min_hw) {
  if (g.t <= 0 || g.t % 2 != 0) {
    throw CorpusError(CorpusError::Kind::invalid_geometry,
                      "geometry: T must be positive and even, got T=" + std::to_string(g.t));
  }
  if (g.h < min_hw || g.w < min_hw) {
    throw CorpusError(CorpusError::Kind::invalid_geometry,
                      "geometry: H and W must be at least " + std::to_string(min_hw) + ", got " +
                          std::to_string(g.h) + "x" + std::to_string(g.w));
  }
  if (g.c != 1 && g.c != 3) {
    throw CorpusError(CorpusError::Kind::invalid_geometry,
                      "geometry: C must be 1 or 3, got C=" + std::to_string(g.c));
  }
}

// Sprite shapes, identified by class label. Coverage is evaluated by 4x4
// supersampling of the analytic interior, which antialiases the triangle's
// diagonal while keeping axis-aligned shapes crisp.
struct Shape {
  int bw, bh;
  bool (*inside)(double x, double y);
};

bool square_inside(double x, double y) { return x >= 0 && x < 10 && y >= 0 && y < 10; }
bool cross_inside(double x, double y) {
  const bool hbar = x >= 0 && x < 13 && y >= 5 && y < 8;
  const bool vbar = x >= 5 && x < 8 && y >= 0 && y < 13;
  return hbar || vbar;
}
bool triangle_inside(double x, double y) {
  return x >= 0 && y >= 0 && x + y <= 9.0;
}

constexpr Shape kShapes[] = {
    {10, 10, square_inside},
    {13, 13, cross_inside},
    {10, 10, triangle_inside},
};

double coverage(const Shape& s, int lx, int ly) {
  int hit = 0;
  for (int sy = 0; sy < 4; ++sy) {
    for (int sx = 0; sx < 4; ++sx) {
      const double x = lx + (sx + 0.5) / 4.0;
      const double y = ly + (sy + 0.5) / 4.0;
      if (s.inside(x, y)) ++hit;
    }
  }
  return hit / 16.0;
}

void render_shape(VideoClip& clip, int frame, const Shape& s, int ox, int oy) {
  for (int ly = 0; ly < s.bh; ++ly) {
    for (int lx = 0; lx < s.bw; ++lx) {
      const double cov = coverage(s, lx, ly);
      if (cov <= 0.0) continue;
      const int x = ox + lx;
      const int y = oy + ly;
      if (x < 0 || x >= clip.w || y < 0 || y >= clip.h) continue;
      for (int ch = 0; ch < clip.c; ++ch) clip.px(frame, y, x, ch) = q32(cov);
    }
  }
}

// Toroidal render in x and y (used by the temporal task).
void render_square_wrapped(VideoClip& clip, int frame, int side, int ox, int oy) {
  for (int ly = 0; ly < side; ++ly) {
    for (int lx = 0; lx < side; ++lx) {
      const int x = ((ox + lx) % clip.w + clip.w) % clip.w;
      const int y = ((oy + ly) % clip.h + clip.h) % clip.h;
      for (int ch = 0; ch < clip.c; ++ch) clip.px(frame, y, x, ch) = 1.0;
    }
  }
}

}  // namespace

LabeledVideoSet gen_spatial_task(std::uint64_t seed, int n, Geometry geo, int class_count,
                                 Split split, int jitter_px) {
  check_geometry(geo, 16);
  if (class_count < 1 || class_count > 3) {
    throw CorpusError(CorpusError::Kind::unsupported_class_count,
                      "spatial task supports 1..3 classes (square/cross/triangle), got " +
                          std::to_string(class_count));
  }
  if (n <= 0) {
    throw CorpusError(CorpusError::Kind::invalid_geometry, "clip count must be positive");
  }

  LabeledVideoSet set;
  set.class_count = class_count;
  set.split = split;
  set.clips.resize(static_cast<std::size_t>(n));
  set.labels.resize(static_cast<std::size_t>(n));

  parallel_for(n, [&](int i) {
    Rng rng(derive_seed(seed, "spatial_clip", static_cast<std::uint64_t>(i)));
    const int label = i % class_count;
    const Shape& shape = kShapes[label];
    VideoClip clip(geo.t, geo.h, geo.w, geo.c);

    const int x_span = geo.w - shape.bw - 2 * jitter_px;
    const int y_span = geo.h - shape.bh - 2 * jitter_px;
    const int x0 = jitter_px + static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(x_span + 1)));
    const int y0 = jitter_px + static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(y_span + 1)));
    for (int f = 0; f < geo.t; ++f) {
      const int jspan = 2 * jitter_px + 1;
      const int dx = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(jspan))) - jitter_px;
      const int dy = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(jspan))) - jitter_px;
      render_shape(clip, f, shape, x0 + dx, y0 + dy);
    }
    set.clips[static_cast<std::size_t>(i)] = std::move(clip);
    set.labels[static_cast<std::size_t>(i)] = label;
  });
  return set;
}

LabeledVideoSet gen_temporal_task(std::uint64_t seed, int n, Geometry geo, int class_count,
                                  Split split) {
  check_geometry(geo, 16);
  if (class_count != 2 && class_count != 4) {
    throw CorpusError(CorpusError::Kind::unsupported_class_count,
                      "temporal task supports 2 (left/right) or 4 (+up/down) classes, got " +
                          std::to_string(class_count));
  }
  if (n <= 0) {
    throw CorpusError(CorpusError::Kind::invalid_geometry, "clip count must be positive");
  }

  // Sprite side and per-frame displacement scale with the frame so the motion
  // stays visible at patch granularity on any geometry.
  const int kSide = std::min(geo.h, geo.w) / 2;
  const int kSpeed = std::min(geo.h, geo.w) / 8;

  LabeledVideoSet set;
  set.class_count = class_count;
  set.split = split;
  set.clips.resize(static_cast<std::size_t>(n));
  set.labels.resize(static_cast<std::size_t>(n));

  parallel_for(n, [&](int i) {
    Rng rng(derive_seed(seed, "temporal_clip", static_cast<std::uint64_t>(i)));
    const int label = i % class_count;
    VideoClip clip(geo.t, geo.h, geo.w, geo.c);

    const bool horizontal = label < 2;
    const bool reversed = (label % 2) == 1;
    // The moving axis is toroidal and its start is uniform over the full
    // period, so the per-frame position distribution is identical for both
    // directions; a single frame carries no label signal.
    if (horizontal) {
      const int x0 = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(geo.w)));
      const int y0 = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(geo.h - kSide + 1)));
      for (int f = 0; f < geo.t; ++f) {
        const int step = reversed ? geo.t - 1 - f : f;
        render_square_wrapped(clip, f, kSide, x0 + kSpeed * step, y0);
      }
    } else {
      const int x0 = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(geo.w - kSide + 1)));
      const int y0 = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(geo.h)));
      for (int f = 0; f < geo.t; ++f) {
        const int step = reversed ? geo.t - 1 - f : f;
        render_square_wrapped(clip, f, kSide, x0, y0 + kSpeed * step);
      }
    }
    set.clips[static_cast<std::size_t>(i)] = std::move(clip);
    set.labels[static_cast<std::size_t>(i)] = label;
  });
  return set;
}

void save_corpus(const LabeledVideoSet& set, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CorpusError(CorpusError::Kind::io, "cannot create corpus directory " + dir);

  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw CorpusError(CorpusError::Kind::io, "cannot write manifest in " + dir);
  manifest << "class_count=" << set.class_count << "\n";
  manifest << "split=" << (set.split == Split::train ? "train" : "val") << "\n";
  for (std::size_t i = 0; i < set.clips.size(); ++i) {
    const VideoClip& clip = set.clips[i];
    manifest << "clip_" << i << " label=" << set.labels[i] << " shape=" << clip.t << "x" << clip.h
             << "x" << clip.w << "x" << clip.c << "\n";
  }
  manifest.close();

  for (std::size_t i = 0; i < set.clips.size(); ++i) {
    const VideoClip& clip = set.clips[i];
    std::ofstream out(fs::path(dir) / ("clip_" + std::to_string(i) + ".f32"), std::ios::binary);
    if (!out) throw CorpusError(CorpusError::Kind::io, "cannot write clip " + std::to_string(i));
    std::vector<float> buf(clip.frames.size());
    for (std::size_t k = 0; k < buf.size(); ++k) buf[k] = static_cast<float>(clip.frames[k]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
}

LabeledVideoSet load_corpus(const std::string& dir) {
  const fs::path manifest_path = fs::path(dir) / "manifest.txt";
  if (!fs::exists(manifest_path)) {
    throw CorpusError(CorpusError::Kind::missing_manifest, "missing manifest.txt in " + dir);
  }
  std::ifstream manifest(manifest_path);
  if (!manifest) throw CorpusError(CorpusError::Kind::io, "cannot open " + manifest_path.string());

  LabeledVideoSet set;
  std::string line;

  auto corrupt = [&](const std::string& why) -> CorpusError {
    return CorpusError(CorpusError::Kind::corrupt_manifest, "corrupt manifest: " + why);
  };

  if (!std::getline(manifest, line) || line.rfind("class_count=", 0) != 0) {
    throw corrupt("expected class_count= header");
  }
  set.class_count = std::atoi(line.c_str() + 12);
  if (set.class_count <= 0) throw corrupt("class_count must be positive");

  if (!std::getline(manifest, line) || line.rfind("split=", 0) != 0) {
    throw corrupt("expected split= header");
  }
  const std::string split_tag = line.substr(6);
  if (split_tag == "train") {
    set.split = Split::train;
  } else if (split_tag == "val") {
    set.split = Split::val;
  } else {
    throw corrupt("unknown split tag '" + split_tag + "'");
  }

  std::size_t expect_idx = 0;
  int st = -1, sh = -1, sw = -1, sc = -1;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string clip_tag, label_kv, shape_kv;
    if (!(ls >> clip_tag >> label_kv >> shape_kv)) throw corrupt("bad clip line '" + line + "'");
    if (clip_tag != "clip_" + std::to_string(expect_idx)) {
      throw corrupt("unexpected clip id '" + clip_tag + "'");
    }
    if (label_kv.rfind("label=", 0) != 0 || shape_kv.rfind("shape=", 0) != 0) {
      throw corrupt("bad clip line '" + line + "'");
    }
    const int label = std::atoi(label_kv.c_str() + 6);
    int t, h, w, c;
    if (std::sscanf(shape_kv.c_str() + 6, "%dx%dx%dx%d", &t, &h, &w, &c) != 4 || t <= 0 || h <= 0 ||
        w <= 0 || c <= 0) {
      throw corrupt("bad shape '" + shape_kv + "'");
    }
    if (label < 0 || label >= set.class_count) {
      throw CorpusError(CorpusError::Kind::label_out_of_range,
                        "label " + std::to_string(label) + " outside [0, " +
                            std::to_string(set.class_count) + ") for " + clip_tag);
    }
    if (st < 0) {
      st = t; sh = h; sw = w; sc = c;
    } else if (t != st || h != sh || w != sw || c != sc) {
      throw CorpusError(CorpusError::Kind::shape_mismatch,
                        "clip shapes differ within corpus at " + clip_tag);
    }

    const fs::path clip_path = fs::path(dir) / (clip_tag + ".f32");
    std::ifstream in(clip_path, std::ios::binary);
    if (!in) {
      throw CorpusError(CorpusError::Kind::corrupt_clip, "missing clip file " + clip_path.string());
    }
    const std::size_t count = static_cast<std::size_t>(t) * h * w * c;
    std::vector<float> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float)) {
      throw CorpusError(CorpusError::Kind::corrupt_clip,
                        "clip file " + clip_path.string() + " is truncated");
    }
    VideoClip clip(t, h, w, c);
    for (std::size_t k = 0; k < count; ++k) {
      const double v = static_cast<double>(buf[k]);
      if (!(v >= 0.0 && v <= 1.0)) {
        throw CorpusError(CorpusError::Kind::corrupt_clip,
                          "pixel value outside [0,1] in " + clip_path.string());
      }
      clip.frames[k] = v;
    }
    set.clips.push_back(std::move(clip));
    set.labels.push_back(label);
    ++expect_idx;
  }
  return set;
}

NormStats compute_norm_stats(const LabeledVideoSet& set) {
  if (set.clips.empty()) {
    throw CorpusError(CorpusError::Kind::empty_set, "norm stats require a nonempty set");
  }
  const int channels = set.clips[0].c;
  std::vector<double> sum(static_cast<std::size_t>(channels), 0.0);
  std::vector<double> sumsq(static_cast<std::size_t>(channels), 0.0);
  std::vector<std::size_t> count(static_cast<std::size_t>(channels), 0);
  for (const VideoClip& clip : set.clips) {
    for (std::size_t k = 0; k < clip.frames.size(); ++k) {
      const std::size_t ch = k % static_cast<std::size_t>(channels);
      sum[ch] += clip.frames[k];
      sumsq[ch] += clip.frames[k] * clip.frames[k];
      ++count[ch];
    }
  }
  NormStats stats;
  for (int ch = 0; ch < channels; ++ch) {
    const double n = static_cast<double>(count[static_cast<std::size_t>(ch)]);
    const double mean = sum[static_cast<std::size_t>(ch)] / n;
    double var = sumsq[static_cast<std::size_t>(ch)] / n - mean * mean;
    if (var < 0.0) var = 0.0;
    if (var < 1e-15) {
      throw CorpusError(CorpusError::Kind::zero_variance,
                        "channel " + std::to_string(ch) + " has zero variance");
    }
    stats.mean.push_back(q32(mean));
    stats.stddev.push_back(q32(std::sqrt(var)));
  }
  return stats;
}

ClipArray normalize(const VideoClip& clip, const NormStats& stats) {
  if (static_cast<int>(stats.mean.size()) != clip.c) {
    throw CorpusError(CorpusError::Kind::shape_mismatch,
                      "norm stats channel count does not match clip");
  }
  ClipArray out{clip.t, clip.h, clip.w, clip.c, clip.frames};
  for (std::size_t k = 0; k < out.v.size(); ++k) {
    const std::size_t ch = k % static_cast<std::size_t>(clip.c);
    out.v[k] = (out.v[k] - stats.mean[ch]) / stats.stddev[ch];
  }
  return out;
}

void save_norm_stats(const NormStats& stats, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw CorpusError(CorpusError::Kind::io, "cannot write " + path);
  char buf[64];
  for (std::size_t ch = 0; ch < stats.mean.size(); ++ch) {
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<float>(stats.mean[ch]));
    out << "mean_" << ch << "=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<float>(stats.stddev[ch]));
    out << "std_" << ch << "=" << buf << "\n";
  }
}

NormStats load_norm_stats(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError(CorpusError::Kind::io, "cannot open " + path);
  NormStats stats;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw CorpusError(CorpusError::Kind::corrupt_manifest, "bad norm line '" + line + "'");
    }
    const std::string key = line.substr(0, eq);
    const double value = q32(std::strtod(line.c_str() + eq + 1, nullptr));
    if (key.rfind("mean_", 0) == 0) {
      stats.mean.push_back(value);
    } else if (key.rfind("std_", 0) == 0) {
      stats.stddev.push_back(value);
    } else {
      throw CorpusError(CorpusError::Kind::corrupt_manifest, "bad norm key '" + key + "'");
    }
  }
  if (stats.mean.size() != stats.stddev.size() || stats.mean.empty()) {
    throw CorpusError(CorpusError::Kind::corrupt_manifest, "norm stats incomplete in " + path);
  }
  for (const double s : stats.stddev) {
    if (!(s > 0.0)) {
      throw CorpusError(CorpusError::Kind::zero_variance, "nonpositive std in " + path);
    }
  }
  return stats;
}

}  // namespace mvd::data
