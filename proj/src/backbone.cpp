#include "mvd/backbone.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mvd/hash.hpp"
#include "mvd/rng.hpp"

namespace mvd::model {

namespace fs = std::filesystem;

void validate_config(const ModelConfig& cfg) {
  if (cfg.embed_dim <= 0 || cfg.depth < 1 || cfg.heads <= 0 || cfg.mlp_ratio <= 0) {
    throw std::invalid_argument("model config: dims and depth must be positive");
  }
  if (cfg.embed_dim % cfg.heads != 0) {
    throw std::invalid_argument("embed_dim=" + std::to_string(cfg.embed_dim) +
                                " not divisible by heads=" + std::to_string(cfg.heads));
  }
  if (cfg.decoder_dim <= 0 || cfg.decoder_depth < 1) {
    throw std::invalid_argument("decoder config: dim and depth must be positive");
  }
  if (cfg.decoder_dim % cfg.heads != 0) {
    throw std::invalid_argument("decoder_dim not divisible by heads");
  }
  if (cfg.channels != 1 && cfg.channels != 3) {
    throw std::invalid_argument("channels must be 1 or 3");
  }
  if (cfg.layout.total() <= 0) throw std::invalid_argument("empty token layout");
  if (cfg.modality == Modality::image && (cfg.layout.t_tokens != 1 || cfg.layout.pt != 1)) {
    throw std::invalid_argument("image modality requires a single-frame layout (pt=1)");
  }
  if (cfg.embed_dim % 2 != 0) {
    throw std::invalid_argument("embed_dim must be even for sin-cos positions");
  }
}

nn::Var ParamStore::add(const std::string& name, nn::Mat value, bool trainable) {
  if (params.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  names.push_back(name);
  auto var = nn::leaf(std::move(value), trainable);
  params.emplace(name, var);
  return var;
}

const nn::Var& ParamStore::get(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

std::vector<nn::Var> ParamStore::trainable() const {
  std::vector<nn::Var> out;
  for (const auto& name : names) {
    const nn::Var& v = params.at(name);
    if (v->requires_grad) out.push_back(v);
  }
  return out;
}

void ParamStore::set_trainable(bool trainable) {
  for (const auto& name : names) params.at(name)->requires_grad = trainable;
}

namespace {

// 1D sin-cos table: dim must be even; column 2i is sin(p w_i), 2i+1 is cos.
void fill_axis(nn::Mat& out, long col0, int dim, int axis_len, int stride_of_axis,
               int period_of_axis) {
  for (long row = 0; row < out.rows; ++row) {
    const int pos = (static_cast<int>(row) / stride_of_axis) % period_of_axis;
    (void)axis_len;
    for (int i = 0; i < dim / 2; ++i) {
      const double omega = std::pow(10000.0, -2.0 * i / dim);
      out.at(row, col0 + 2 * i) = std::sin(pos * omega);
      out.at(row, col0 + 2 * i + 1) = std::cos(pos * omega);
    }
  }
}

int even_floor(int x) { return x - (x % 2); }

}  // namespace

nn::Mat sincos_pos_embed(const tok::TokenLayout& layout, int dim, Modality modality) {
  nn::Mat out(layout.total(), dim);
  int d_t = 0, d_h, d_w;
  if (modality == Modality::video) {
    d_t = std::max(2, even_floor(dim / 4));
    d_h = even_floor((dim - d_t) / 2);
    d_w = dim - d_t - d_h;
  } else {
    d_h = even_floor(dim / 2);
    d_w = dim - d_h;
  }
  const int hw = layout.spatial();
  if (d_t > 0) fill_axis(out, 0, d_t, layout.t_tokens, hw, layout.t_tokens);
  fill_axis(out, d_t, d_h, layout.h_tokens, layout.w_tokens, layout.h_tokens);
  fill_axis(out, d_t + d_h, d_w, layout.w_tokens, 1, layout.w_tokens);
  return out;
}

namespace {

struct TensorSpec {
  std::string name;
  long rows, cols;
};

void block_specs(std::vector<TensorSpec>& specs, int depth, int dim, int mlp_ratio) {
  for (int i = 0; i < depth; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    specs.push_back({p + "norm1.gamma", 1, dim});
    specs.push_back({p + "norm1.beta", 1, dim});
    specs.push_back({p + "attn.qkv.weight", dim, 3L * dim});
    specs.push_back({p + "attn.qkv.bias", 1, 3L * dim});
    specs.push_back({p + "attn.proj.weight", dim, dim});
    specs.push_back({p + "attn.proj.bias", 1, dim});
    specs.push_back({p + "norm2.gamma", 1, dim});
    specs.push_back({p + "norm2.beta", 1, dim});
    specs.push_back({p + "mlp.fc1.weight", dim, static_cast<long>(mlp_ratio) * dim});
    specs.push_back({p + "mlp.fc1.bias", 1, static_cast<long>(mlp_ratio) * dim});
    specs.push_back({p + "mlp.fc2.weight", static_cast<long>(mlp_ratio) * dim, dim});
    specs.push_back({p + "mlp.fc2.bias", 1, dim});
  }
}

std::vector<TensorSpec> encoder_specs(const ModelConfig& cfg) {
  std::vector<TensorSpec> specs;
  specs.push_back({"patch_embed.weight", cfg.patch_dim(), cfg.embed_dim});
  specs.push_back({"patch_embed.bias", 1, cfg.embed_dim});
  block_specs(specs, cfg.depth, cfg.embed_dim, cfg.mlp_ratio);
  specs.push_back({"norm.gamma", 1, cfg.embed_dim});
  specs.push_back({"norm.beta", 1, cfg.embed_dim});
  return specs;
}

std::vector<TensorSpec> decoder_specs(const DecoderConfig& cfg) {
  std::vector<TensorSpec> specs;
  specs.push_back({"embed.weight", cfg.input_dim, cfg.dim});
  specs.push_back({"embed.bias", 1, cfg.dim});
  specs.push_back({"mask_token", 1, cfg.dim});
  block_specs(specs, cfg.depth, cfg.dim, cfg.mlp_ratio);
  specs.push_back({"norm.gamma", 1, cfg.dim});
  specs.push_back({"norm.beta", 1, cfg.dim});
  specs.push_back({"head.weight", cfg.dim, cfg.output_dim});
  specs.push_back({"head.bias", 1, cfg.output_dim});
  return specs;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

nn::Mat init_tensor(const TensorSpec& spec, std::uint64_t model_seed) {
  nn::Mat m(spec.rows, spec.cols);
  if (ends_with(spec.name, "gamma")) {
    for (auto& x : m.d) x = 1.0;
    return m;
  }
  if (ends_with(spec.name, "bias") || ends_with(spec.name, "beta")) {
    return m;  // zeros
  }
  // Weight matrices and the mask token draw from N(0, 0.02^2); the seed is
  // keyed by tensor name so adding a tensor never reshuffles the others.
  Rng rng(derive_seed(model_seed, spec.name.c_str(), 0));
  for (auto& x : m.d) x = 0.02 * rng.normal();
  return m;
}

void fill_store(ParamStore& store, const std::vector<TensorSpec>& specs, std::uint64_t seed) {
  for (const auto& spec : specs) store.add(spec.name, init_tensor(spec, seed));
}

// Pre-norm block stack shared by encoder and decoder.
nn::Var run_blocks(const ParamStore& store, const nn::Var& input, int depth, int dim, int heads) {
  const int dh = dim / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  nn::Var x = input;
  for (int i = 0; i < depth; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    nn::Var h = nn::layer_norm(x, store.get(p + "norm1.gamma"), store.get(p + "norm1.beta"));
    nn::Var qkv = nn::add_rowvec(nn::matmul(h, store.get(p + "attn.qkv.weight")),
                                 store.get(p + "attn.qkv.bias"));
    std::vector<nn::Var> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int a = 0; a < heads; ++a) {
      nn::Var q = nn::slice_cols(qkv, a * dh, (a + 1) * dh);
      nn::Var k = nn::slice_cols(qkv, dim + a * dh, dim + (a + 1) * dh);
      nn::Var v = nn::slice_cols(qkv, 2 * dim + a * dh, 2 * dim + (a + 1) * dh);
      nn::Var att = nn::softmax_rows(nn::scale(nn::matmul_nt(q, k), att_scale));
      head_outs.push_back(nn::matmul(att, v));
    }
    nn::Var attn_out = heads == 1 ? head_outs[0] : nn::concat_cols(head_outs);
    attn_out = nn::add_rowvec(nn::matmul(attn_out, store.get(p + "attn.proj.weight")),
                              store.get(p + "attn.proj.bias"));
    x = nn::add(x, attn_out);

    nn::Var m = nn::layer_norm(x, store.get(p + "norm2.gamma"), store.get(p + "norm2.beta"));
    m = nn::gelu(nn::add_rowvec(nn::matmul(m, store.get(p + "mlp.fc1.weight")),
                                store.get(p + "mlp.fc1.bias")));
    m = nn::add_rowvec(nn::matmul(m, store.get(p + "mlp.fc2.weight")),
                       store.get(p + "mlp.fc2.bias"));
    x = nn::add(x, m);
  }
  return x;
}

}  // namespace

TransformerModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  TransformerModel model;
  model.config = cfg;
  fill_store(model.store, encoder_specs(cfg), seed);
  model.pos_embed = sincos_pos_embed(cfg.layout, cfg.embed_dim, cfg.modality);
  return model;
}

DecoderModel init_decoder(const DecoderConfig& cfg, std::uint64_t seed) {
  if (cfg.input_dim <= 0 || cfg.dim <= 0 || cfg.depth < 1 || cfg.output_dim <= 0 ||
      cfg.heads <= 0 || cfg.dim % cfg.heads != 0 || cfg.dim % 2 != 0) {
    throw std::invalid_argument("bad decoder config");
  }
  DecoderModel dec;
  dec.config = cfg;
  fill_store(dec.store, decoder_specs(cfg), seed);
  // The decoder sees every position, so its positions use the video split
  // whenever the layout is temporal.
  dec.pos_embed = sincos_pos_embed(cfg.layout, cfg.dim,
                                   cfg.layout.t_tokens > 1 ? Modality::video : Modality::image);
  return dec;
}

nn::Var encode(const TransformerModel& model, const nn::Mat& visible_tokens,
               const std::vector<int>& visible_idx) {
  const ModelConfig& cfg = model.config;
  if (visible_tokens.rows != static_cast<long>(visible_idx.size())) {
    throw std::invalid_argument("encode: token count does not match index list");
  }
  if (visible_tokens.cols != cfg.patch_dim()) {
    throw std::invalid_argument("encode: token width does not match patch volume");
  }
  nn::Mat pos(visible_tokens.rows, cfg.embed_dim);
  for (std::size_t r = 0; r < visible_idx.size(); ++r) {
    const int idx = visible_idx[r];
    if (idx < 0 || idx >= cfg.layout.total()) throw std::out_of_range("encode: token index out of range");
    for (int c = 0; c < cfg.embed_dim; ++c) pos.at(static_cast<long>(r), c) = model.pos_embed.at(idx, c);
  }
  nn::Var x = nn::add_rowvec(nn::matmul(nn::constant(visible_tokens), model.store.get("patch_embed.weight")),
                             model.store.get("patch_embed.bias"));
  x = nn::add(x, nn::constant(std::move(pos)));
  x = run_blocks(model.store, x, cfg.depth, cfg.embed_dim, cfg.heads);
  return nn::layer_norm(x, model.store.get("norm.gamma"), model.store.get("norm.beta"));
}

nn::Var decode(const DecoderModel& decoder, const nn::Var& visible_features,
               const std::vector<int>& visible_idx, const std::vector<int>& masked_idx) {
  const DecoderConfig& cfg = decoder.config;
  if (visible_features->value.cols != cfg.input_dim) {
    throw std::invalid_argument("decode: feature width does not match decoder input_dim");
  }
  if (static_cast<int>(visible_idx.size() + masked_idx.size()) != cfg.layout.total()) {
    throw std::invalid_argument("decode: index lists must cover the full token grid");
  }
  nn::Var v = nn::add_rowvec(nn::matmul(visible_features, decoder.store.get("embed.weight")),
                             decoder.store.get("embed.bias"));
  nn::Var full = nn::assemble_rows(v, decoder.store.get("mask_token"), visible_idx, masked_idx);
  full = nn::add(full, nn::constant(decoder.pos_embed));
  full = run_blocks(decoder.store, full, cfg.depth, cfg.dim, cfg.heads);
  full = nn::layer_norm(full, decoder.store.get("norm.gamma"), decoder.store.get("norm.beta"));
  return nn::add_rowvec(nn::matmul(full, decoder.store.get("head.weight")),
                        decoder.store.get("head.bias"));
}

void freeze(TransformerModel& model) {
  model.frozen = true;
  model.store.set_trainable(false);
}

TransformerModel clone_model(const TransformerModel& model, bool trainable) {
  TransformerModel out;
  out.config = model.config;
  out.pos_embed = model.pos_embed;
  out.frozen = !trainable;
  for (const auto& name : model.store.names) {
    out.store.add(name, model.store.get(name)->value, trainable);
  }
  return out;
}

namespace {

void hash_mat(Fnv1a& h, const std::string& name, const nn::Mat& m) {
  h.update(name.data(), name.size());
  const std::uint32_t dims[2] = {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)};
  h.update(dims, sizeof(dims));
  for (const double v : m.d) {
    const float f = static_cast<float>(v);
    h.update(&f, sizeof(f));
  }
}

}  // namespace

std::string param_hash(const TransformerModel& model) {
  Fnv1a h;
  for (const auto& name : model.store.names) {
    hash_mat(h, name, model.store.get(name)->value);
  }
  return h.hex();
}

namespace {

void write_tensor(const fs::path& path, const nn::Mat& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  const std::uint32_t rank = 2;
  const std::uint32_t dims[2] = {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)};
  out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  std::vector<float> buf(m.d.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(m.d[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

nn::Mat read_tensor(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::uint32_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), sizeof(rank));
  if (!in || rank != 2) throw CheckpointError("bad tensor rank in " + path.string());
  std::uint32_t dims[2];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!in) throw CheckpointError("bad tensor header in " + path.string());
  nn::Mat m(static_cast<long>(dims[0]), static_cast<long>(dims[1]));
  std::vector<float> buf(m.d.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float)) {
    throw CheckpointError("truncated tensor " + path.string());
  }
  for (std::size_t i = 0; i < buf.size(); ++i) m.d[i] = static_cast<double>(buf[i]);
  return m;
}

}  // namespace

void save_checkpoint(const TransformerModel& model, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "params", ec);
  if (ec) throw CheckpointError("cannot create checkpoint directory " + dir);

  std::ofstream cfgf(fs::path(dir) / "config.txt");
  if (!cfgf) throw CheckpointError("cannot write config in " + dir);
  const ModelConfig& c = model.config;
  cfgf << "modality=" << (c.modality == Modality::video ? "video" : "image") << "\n"
       << "embed_dim=" << c.embed_dim << "\n"
       << "depth=" << c.depth << "\n"
       << "heads=" << c.heads << "\n"
       << "mlp_ratio=" << c.mlp_ratio << "\n"
       << "decoder_dim=" << c.decoder_dim << "\n"
       << "decoder_depth=" << c.decoder_depth << "\n"
       << "channels=" << c.channels << "\n"
       << "pt=" << c.layout.pt << "\n"
       << "ps=" << c.layout.ps << "\n"
       << "t_tokens=" << c.layout.t_tokens << "\n"
       << "h_tokens=" << c.layout.h_tokens << "\n"
       << "w_tokens=" << c.layout.w_tokens << "\n"
       << "frozen=" << (model.frozen ? 1 : 0) << "\n";
  cfgf.close();

  std::ofstream index(fs::path(dir) / "params" / "index.txt");
  if (!index) throw CheckpointError("cannot write param index in " + dir);
  for (const auto& name : model.store.names) index << name << "\n";
  index.close();

  for (const auto& name : model.store.names) {
    write_tensor(fs::path(dir) / "params" / (name + ".f32"), model.store.get(name)->value);
  }
}

TransformerModel load_checkpoint(const std::string& dir) {
  std::ifstream cfgf(fs::path(dir) / "config.txt");
  if (!cfgf) throw CheckpointError("missing config.txt in " + dir);
  ModelConfig cfg;
  bool frozen = false;
  std::string line;
  while (std::getline(cfgf, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("bad config line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "modality") {
      if (val == "video") {
        cfg.modality = Modality::video;
      } else if (val == "image") {
        cfg.modality = Modality::image;
      } else {
        throw CheckpointError("unknown modality '" + val + "'");
      }
    } else if (key == "embed_dim") {
      cfg.embed_dim = std::stoi(val);
    } else if (key == "depth") {
      cfg.depth = std::stoi(val);
    } else if (key == "heads") {
      cfg.heads = std::stoi(val);
    } else if (key == "mlp_ratio") {
      cfg.mlp_ratio = std::stoi(val);
    } else if (key == "decoder_dim") {
      cfg.decoder_dim = std::stoi(val);
    } else if (key == "decoder_depth") {
      cfg.decoder_depth = std::stoi(val);
    } else if (key == "channels") {
      cfg.channels = std::stoi(val);
    } else if (key == "pt") {
      cfg.layout.pt = std::stoi(val);
    } else if (key == "ps") {
      cfg.layout.ps = std::stoi(val);
    } else if (key == "t_tokens") {
      cfg.layout.t_tokens = std::stoi(val);
    } else if (key == "h_tokens") {
      cfg.layout.h_tokens = std::stoi(val);
    } else if (key == "w_tokens") {
      cfg.layout.w_tokens = std::stoi(val);
    } else if (key == "frozen") {
      frozen = val == "1";
    } else {
      throw CheckpointError("unknown config key '" + key + "'");
    }
  }
  try {
    validate_config(cfg);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid checkpoint config: ") + e.what());
  }

  std::ifstream index(fs::path(dir) / "params" / "index.txt");
  if (!index) throw CheckpointError("missing params/index.txt in " + dir);
  std::vector<std::string> names;
  while (std::getline(index, line)) {
    if (!line.empty()) names.push_back(line);
  }

  const auto specs = encoder_specs(cfg);
  if (names.size() != specs.size()) {
    throw CheckpointError("checkpoint lists " + std::to_string(names.size()) + " tensors, config needs " +
                          std::to_string(specs.size()));
  }

  TransformerModel model;
  model.config = cfg;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (names[i] != specs[i].name) {
      throw CheckpointError("tensor order mismatch at '" + names[i] + "', expected '" +
                            specs[i].name + "'");
    }
    nn::Mat m = read_tensor(fs::path(dir) / "params" / (names[i] + ".f32"));
    if (m.rows != specs[i].rows || m.cols != specs[i].cols) {
      throw CheckpointError("tensor " + names[i] + " has shape " + std::to_string(m.rows) + "x" +
                            std::to_string(m.cols) + ", expected " + std::to_string(specs[i].rows) +
                            "x" + std::to_string(specs[i].cols));
    }
    model.store.add(names[i], std::move(m));
  }
  model.pos_embed = sincos_pos_embed(cfg.layout, cfg.embed_dim, cfg.modality);
  if (frozen) freeze(model);
  return model;
}

}  // namespace mvd::model
