#include "mvd/tokenizer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mvd/rng.hpp"

namespace mvd::tok {

TokenLayout layout_for(const data::Geometry& geo, int pt, int ps) {
  if (pt <= 0 || ps <= 0) throw std::invalid_argument("patch sizes must be positive");
  if (geo.t % pt != 0) {
    throw std::invalid_argument("T=" + std::to_string(geo.t) + " not divisible by pt=" +
                                std::to_string(pt));
  }
  if (geo.h % ps != 0) {
    throw std::invalid_argument("H=" + std::to_string(geo.h) + " not divisible by ps=" +
                                std::to_string(ps));
  }
  if (geo.w % ps != 0) {
    throw std::invalid_argument("W=" + std::to_string(geo.w) + " not divisible by ps=" +
                                std::to_string(ps));
  }
  TokenLayout layout;
  layout.pt = pt;
  layout.ps = ps;
  layout.t_tokens = geo.t / pt;
  layout.h_tokens = geo.h / ps;
  layout.w_tokens = geo.w / ps;
  return layout;
}

TokenLayout image_layout_for(int h, int w, int c, int ps) {
  return layout_for(data::Geometry{1, h, w, c}, 1, ps);
}

int TubeMask::masked_spatial_count() const {
  int n = 0;
  for (const std::uint8_t m : spatial) n += m != 0;
  return n;
}

std::vector<int> TubeMask::masked_indices() const {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(masked_spatial_count()) * layout.t_tokens);
  for (int idx = 0; idx < layout.total(); ++idx) {
    if (masked(idx)) out.push_back(idx);
  }
  return out;
}

std::vector<int> TubeMask::visible_indices() const {
  std::vector<int> out;
  for (int idx = 0; idx < layout.total(); ++idx) {
    if (!masked(idx)) out.push_back(idx);
  }
  return out;
}

TubeMask make_tube_mask(const TokenLayout& layout, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("mask ratio must be in [0,1), got " + std::to_string(ratio));
  }
  TubeMask mask;
  mask.layout = layout;
  mask.ratio = ratio;
  mask.spatial.assign(static_cast<std::size_t>(layout.spatial()), 0);
  // round-half-to-even, matching the documented on-disk behavior for ties
  const int count = static_cast<int>(std::nearbyint(ratio * layout.spatial()));
  if (count >= layout.spatial()) {
    throw std::invalid_argument("mask ratio " + std::to_string(ratio) + " rounds to all " +
                                std::to_string(layout.spatial()) +
                                " spatial positions; no tokens would stay visible");
  }
  Rng rng(seed);
  for (const std::uint64_t pos :
       rng.sample_without_replacement(static_cast<std::uint64_t>(layout.spatial()),
                                      static_cast<std::uint64_t>(count))) {
    mask.spatial[static_cast<std::size_t>(pos)] = 1;
  }
  return mask;
}

PatchTargets patchify_video(const data::ClipArray& clip, const TokenLayout& layout) {
  if (clip.t != layout.t_tokens * layout.pt || clip.h != layout.h_tokens * layout.ps ||
      clip.w != layout.w_tokens * layout.ps) {
    throw std::invalid_argument("clip geometry does not match token layout");
  }
  PatchTargets out;
  out.layout = layout;
  out.vectors = nn::Mat::zeros(layout.total(), layout.patch_dim(clip.c));
  for (int tau = 0; tau < layout.t_tokens; ++tau) {
    for (int i = 0; i < layout.h_tokens; ++i) {
      for (int j = 0; j < layout.w_tokens; ++j) {
        const int row = tau * layout.spatial() + i * layout.w_tokens + j;
        int col = 0;
        for (int dt = 0; dt < layout.pt; ++dt) {
          for (int dy = 0; dy < layout.ps; ++dy) {
            for (int dx = 0; dx < layout.ps; ++dx) {
              for (int ch = 0; ch < clip.c; ++ch) {
                out.vectors.at(row, col++) =
                    clip.at(tau * layout.pt + dt, i * layout.ps + dy, j * layout.ps + dx, ch);
              }
            }
          }
        }
      }
    }
  }
  return out;
}

PatchTargets patchify_image(const data::ClipArray& frame, const TokenLayout& layout) {
  if (frame.t != 1) throw std::invalid_argument("image patchify expects a single frame");
  if (layout.t_tokens != 1 || layout.pt != 1) {
    throw std::invalid_argument("image layout must have pt=1 and one time token");
  }
  return patchify_video(frame, layout);
}

data::ClipArray unpatchify(const PatchTargets& patches, int channels) {
  const TokenLayout& layout = patches.layout;
  if (patches.vectors.rows != layout.total() ||
      patches.vectors.cols != layout.patch_dim(channels)) {
    throw std::invalid_argument("patch matrix does not match layout");
  }
  data::ClipArray clip;
  clip.t = layout.t_tokens * layout.pt;
  clip.h = layout.h_tokens * layout.ps;
  clip.w = layout.w_tokens * layout.ps;
  clip.c = channels;
  clip.v.assign(static_cast<std::size_t>(clip.t) * clip.h * clip.w * clip.c, 0.0);
  for (int tau = 0; tau < layout.t_tokens; ++tau) {
    for (int i = 0; i < layout.h_tokens; ++i) {
      for (int j = 0; j < layout.w_tokens; ++j) {
        const int row = tau * layout.spatial() + i * layout.w_tokens + j;
        int col = 0;
        for (int dt = 0; dt < layout.pt; ++dt) {
          for (int dy = 0; dy < layout.ps; ++dy) {
            for (int dx = 0; dx < layout.ps; ++dx) {
              for (int ch = 0; ch < channels; ++ch) {
                clip.at(tau * layout.pt + dt, i * layout.ps + dy, j * layout.ps + dx, ch) =
                    patches.vectors.at(row, col++);
              }
            }
          }
        }
      }
    }
  }
  return clip;
}

PatchTargets normalize_patches(const PatchTargets& patches, double eps) {
  PatchTargets out = patches;
  out.normalized = true;
  const long dim = out.vectors.cols;
  for (long r = 0; r < out.vectors.rows; ++r) {
    double sum = 0.0, sumsq = 0.0;
    for (long c = 0; c < dim; ++c) {
      const double v = out.vectors.at(r, c);
      sum += v;
      sumsq += v * v;
    }
    const double mean = sum / static_cast<double>(dim);
    double var = sumsq / static_cast<double>(dim) - mean * mean;
    if (var < 0.0) var = 0.0;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (long c = 0; c < dim; ++c) {
      out.vectors.at(r, c) = (out.vectors.at(r, c) - mean) * inv;
    }
  }
  return out;
}

SplitTokens split_visible(const nn::Mat& tokens, const TubeMask& mask) {
  if (tokens.rows != mask.layout.total()) {
    throw std::invalid_argument("token count does not match mask layout");
  }
  SplitTokens out;
  out.visible_idx = mask.visible_indices();
  out.masked_idx = mask.masked_indices();
  out.visible = nn::Mat::zeros(static_cast<long>(out.visible_idx.size()), tokens.cols);
  for (std::size_t r = 0; r < out.visible_idx.size(); ++r) {
    for (long c = 0; c < tokens.cols; ++c) {
      out.visible.at(static_cast<long>(r), c) = tokens.at(out.visible_idx[r], c);
    }
  }
  return out;
}

}  // namespace mvd::tok
