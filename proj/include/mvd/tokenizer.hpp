#pragma once

#include <cstdint>
#include <vector>

#include "mvd/dataset.hpp"
#include "mvd/mat.hpp"

namespace mvd::tok {

// Token grid for a clip split into pt x ps x ps patches. Token index order is
// time-major: idx = tau * (h_tokens * w_tokens) + i * w_tokens + j.
struct TokenLayout {
  int t_tokens = 0, h_tokens = 0, w_tokens = 0;
  int pt = 0, ps = 0;
  int total() const { return t_tokens * h_tokens * w_tokens; }
  int spatial() const { return h_tokens * w_tokens; }
  int patch_dim(int channels) const { return pt * ps * ps * channels; }
};

TokenLayout layout_for(const data::Geometry& geo, int pt, int ps);
TokenLayout image_layout_for(int h, int w, int c, int ps);

// A 2D spatial mask replicated across every time slice, so a masked spatial
// position hides the whole tube through time.
struct TubeMask {
  TokenLayout layout;
  double ratio = 0.0;
  std::vector<std::uint8_t> spatial;  // h_tokens * w_tokens

  bool masked_spatial(int i, int j) const {
    return spatial[static_cast<std::size_t>(i) * layout.w_tokens + j] != 0;
  }
  bool masked(int token_idx) const { return spatial[static_cast<std::size_t>(token_idx) % spatial.size()] != 0; }
  int masked_spatial_count() const;
  std::vector<int> masked_indices() const;   // 3D token indices, ascending
  std::vector<int> visible_indices() const;  // complement, ascending
};

TubeMask make_tube_mask(const TokenLayout& layout, double ratio, std::uint64_t seed);

// One row per token, columns are the flattened patch pixels in
// (dt, dy, dx, channel) order.
struct PatchTargets {
  TokenLayout layout;
  nn::Mat vectors;
  bool normalized = false;
};

PatchTargets patchify_video(const data::ClipArray& clip, const TokenLayout& layout);
PatchTargets patchify_image(const data::ClipArray& frame, const TokenLayout& layout);
data::ClipArray unpatchify(const PatchTargets& patches, int channels);

// Per-patch standardization of the target vectors: (v - mean) / sqrt(var + eps)
// with population variance per row.
PatchTargets normalize_patches(const PatchTargets& patches, double eps = 1e-6);

struct SplitTokens {
  nn::Mat visible;
  std::vector<int> visible_idx;
  std::vector<int> masked_idx;
};

SplitTokens split_visible(const nn::Mat& tokens, const TubeMask& mask);

}  // namespace mvd::tok
