#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvd/autograd.hpp"
#include "mvd/tokenizer.hpp"

namespace mvd::model {

enum class Modality { image, video };

struct ModelConfig {
  Modality modality = Modality::video;
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int decoder_dim = 32;
  int decoder_depth = 2;
  int channels = 1;
  tok::TokenLayout layout;

  int patch_dim() const { return layout.patch_dim(channels); }
};

void validate_config(const ModelConfig& cfg);

// Insertion-ordered named parameter set. Trainability lives on the Var
// (requires_grad); the order fixes serialization and hashing.
struct ParamStore {
  std::vector<std::string> names;
  std::unordered_map<std::string, nn::Var> params;

  nn::Var add(const std::string& name, nn::Mat value, bool trainable = true);
  const nn::Var& get(const std::string& name) const;
  bool has(const std::string& name) const { return params.count(name) != 0; }
  std::vector<nn::Var> trainable() const;
  void set_trainable(bool trainable);
};

struct TransformerModel {
  ModelConfig config;
  ParamStore store;
  nn::Mat pos_embed;  // layout.total x embed_dim, fixed sin-cos
  bool frozen = false;
};

struct DecoderConfig {
  int input_dim = 0;   // encoder feature width
  int dim = 32;
  int depth = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int output_dim = 0;  // patch volume for pixels, teacher width for features
  tok::TokenLayout layout;
};

struct DecoderModel {
  DecoderConfig config;
  ParamStore store;
  nn::Mat pos_embed;  // layout.total x dim
};

// Fixed sinusoidal embeddings over the token grid; the video variant splits
// the width across (t, h, w), the image variant across (h, w).
nn::Mat sincos_pos_embed(const tok::TokenLayout& layout, int dim, Modality modality);

TransformerModel init_model(const ModelConfig& cfg, std::uint64_t seed);
DecoderModel init_decoder(const DecoderConfig& cfg, std::uint64_t seed);

// Encodes the kept tokens only; dropped tokens never enter the sequence.
// visible_tokens: |visible| x patch_dim, visible_idx: positions in the grid.
nn::Var encode(const TransformerModel& model, const nn::Mat& visible_tokens,
               const std::vector<int>& visible_idx);

// Projects encoder features, fills masked slots with the learned mask token,
// adds decoder positions, and runs the decoder stack. Output covers every
// token position (layout.total x output_dim).
nn::Var decode(const DecoderModel& decoder, const nn::Var& visible_features,
               const std::vector<int>& visible_idx, const std::vector<int>& masked_idx);

// Marks the model fixed: parameters stop requiring grad and training loops
// refuse to touch them. There is no unfreeze.
void freeze(TransformerModel& model);

// Deep copy with fresh parameter nodes. trainable=false yields a detached
// no-grad copy (EMA targets, linear probes).
TransformerModel clone_model(const TransformerModel& model, bool trainable);

std::string param_hash(const TransformerModel& model);

// Checkpoint directory: config.txt (key=value), params/index.txt, and one
// params/<name>.f32 per tensor (u32 rank, u32 dims, f32 payload, little-endian).
void save_checkpoint(const TransformerModel& model, const std::string& dir);
TransformerModel load_checkpoint(const std::string& dir);

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mvd::model
