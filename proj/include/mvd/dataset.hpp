#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvd::data {

// A T x H x W x C pixel array with values in [0, 1]. Pixel values are always
// f32-representable so that the on-disk f32 corpus format round-trips exactly.
struct VideoClip {
  int t = 0, h = 0, w = 0, c = 0;
  std::vector<double> frames;  // (t, y, x, ch) nested, row-major

  VideoClip() = default;
  VideoClip(int t_, int h_, int w_, int c_)
      : t(t_), h(h_), w(w_), c(c_),
        frames(static_cast<std::size_t>(t_) * h_ * w_ * c_, 0.0) {}

  double& px(int ti, int y, int x, int ch) {
    return frames[static_cast<std::size_t>(((ti * h + y) * w + x) * c + ch)];
  }
  double px(int ti, int y, int x, int ch) const {
    return frames[static_cast<std::size_t>(((ti * h + y) * w + x) * c + ch)];
  }
};

// Same geometry as VideoClip but without the [0, 1] range constraint; the
// result type of normalization and the input type of the models.
struct ClipArray {
  int t = 0, h = 0, w = 0, c = 0;
  std::vector<double> v;

  double& at(int ti, int y, int x, int ch) {
    return v[static_cast<std::size_t>(((ti * h + y) * w + x) * c + ch)];
  }
  double at(int ti, int y, int x, int ch) const {
    return v[static_cast<std::size_t>(((ti * h + y) * w + x) * c + ch)];
  }
};

inline ClipArray as_array(const VideoClip& clip) {
  return ClipArray{clip.t, clip.h, clip.w, clip.c, clip.frames};
}

enum class Split { train, val };

struct LabeledVideoSet {
  std::vector<VideoClip> clips;
  std::vector<int> labels;  // in [0, class_count)
  int class_count = 0;
  Split split = Split::train;
};

struct NormStats {
  std::vector<double> mean;  // per channel
  std::vector<double> stddev;  // per channel, > 0
};

struct Geometry {
  int t = 0, h = 0, w = 0, c = 0;
};

// Corpus I/O failures carry a machine-checkable kind alongside the message.
struct CorpusError : std::runtime_error {
  enum class Kind {
    invalid_geometry,
    unsupported_class_count,
    missing_manifest,
    corrupt_manifest,
    corrupt_clip,
    shape_mismatch,
    label_out_of_range,
    io,
    zero_variance,
    empty_set,
  };
  Kind kind;
  CorpusError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// Spatially-heavy task: the label is the sprite shape (square / cross /
// triangle), so any single frame classifies the clip. Frames within a clip
// differ only by an integer jitter of at most jitter_px.
LabeledVideoSet gen_spatial_task(std::uint64_t seed, int n, Geometry geo, int class_count,
                                 Split split = Split::train, int jitter_px = 1);

// Temporally-heavy task: one shared sprite translates toroidally; the label is
// the motion direction. Reversing the frame order of a clip flips the label,
// and the per-frame appearance distribution is identical across classes.
LabeledVideoSet gen_temporal_task(std::uint64_t seed, int n, Geometry geo, int class_count,
                                  Split split = Split::train);

// Directory format: manifest.txt header (class_count, split) plus one line per
// clip, and clip_<idx>.f32 tensors in T, H, W, C order (little-endian f32).
void save_corpus(const LabeledVideoSet& set, const std::string& dir);
LabeledVideoSet load_corpus(const std::string& dir);

NormStats compute_norm_stats(const LabeledVideoSet& set);
ClipArray normalize(const VideoClip& clip, const NormStats& stats);

// norm.txt lines: mean_<c>=<float>, std_<c>=<float>.
void save_norm_stats(const NormStats& stats, const std::string& path);
NormStats load_norm_stats(const std::string& path);

}  // namespace mvd::data
