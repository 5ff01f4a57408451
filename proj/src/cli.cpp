#include "mvd/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <CLI11.hpp>

#include "mvd/backbone.hpp"
#include "mvd/dataset.hpp"
#include "mvd/distill.hpp"
#include "mvd/eval.hpp"
#include "mvd/runconfig.hpp"
#include "mvd/stage1.hpp"
#include "mvd/tokenizer.hpp"

namespace mvd::cli {

namespace fs = std::filesystem;

namespace {

struct ManifestIO {
  std::string path;
  std::string command;
  std::vector<std::pair<std::string, std::string>> inputs;
  std::vector<std::string> outputs;

  // The metadata rides in comment lines so the manifest body stays a loadable
  // config file for replays.
  void write(const RunConfig& snapshot, const char* status, double wall_seconds) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest " + path);
    out << "# mvdlab run manifest\n";
    out << "# command: " << command << "\n";
    out << "# status: " << status << "\n";
    for (const auto& [k, v] : inputs) out << "# input " << k << ": " << v << "\n";
    for (const auto& o : outputs) out << "# output: " << o << "\n";
    if (wall_seconds >= 0.0) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.3f", wall_seconds);
      out << "# wall_clock_seconds: " << buf << "\n";
    }
    out << snapshot.to_ini();
  }
};

// Runs fn between the "running" and "complete" manifest writes.
void with_manifest(ManifestIO& mio, const RunConfig& snapshot, const std::function<void()>& fn) {
  mio.write(snapshot, "running", -1.0);
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  const auto t1 = std::chrono::steady_clock::now();
  mio.write(snapshot, "complete", std::chrono::duration<double>(t1 - t0).count());
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string path_tag(const std::string& p) {
  fs::path fp(p);
  if (fp.filename().empty()) fp = fp.parent_path();
  std::string tag = fp.filename().string();
  return tag.empty() ? p : tag;
}

data::Geometry corpus_geometry(const data::LabeledVideoSet& set) {
  const data::VideoClip& c = set.clips.at(0);
  return data::Geometry{c.t, c.h, c.w, c.c};
}

model::ModelConfig model_config_from(const RunConfig& cfg, const data::Geometry& geo,
                                     model::Modality modality) {
  model::ModelConfig mc;
  mc.modality = modality;
  mc.embed_dim = cfg.model_embed_dim;
  mc.depth = cfg.model_depth;
  mc.heads = cfg.model_heads;
  mc.mlp_ratio = cfg.model_mlp_ratio;
  mc.decoder_dim = cfg.model_decoder_dim;
  mc.decoder_depth = cfg.model_decoder_depth;
  mc.channels = geo.c;
  mc.layout = modality == model::Modality::image
                  ? tok::image_layout_for(geo.h, geo.w, geo.c, cfg.model_ps)
                  : tok::layout_for(geo, cfg.model_pt, cfg.model_ps);
  return mc;
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  std::string task, out, split = "train";
  int n = 0;
  std::uint64_t seed = 0;
  int t = 8, h = 32, w = 32, c = 1;
  int class_count = -1;
  int jitter_px = 1;
};

void cmd_synth(const SynthArgs& a) {
  if (a.task != "spatial" && a.task != "temporal") {
    throw std::invalid_argument("unknown task '" + a.task + "' (expected spatial or temporal)");
  }
  if (a.split != "train" && a.split != "val") {
    throw std::invalid_argument("split must be train or val");
  }
  const data::Split split = a.split == "train" ? data::Split::train : data::Split::val;
  const data::Geometry geo{a.t, a.h, a.w, a.c};
  const int classes = a.class_count > 0 ? a.class_count : (a.task == "spatial" ? 3 : 2);

  RunConfig snapshot;
  snapshot.data_task = a.task;
  snapshot.data_seed = a.seed;
  snapshot.data_t = a.t;
  snapshot.data_h = a.h;
  snapshot.data_w = a.w;
  snapshot.data_c = a.c;
  snapshot.data_class_count = classes;
  snapshot.data_jitter_px = a.jitter_px;
  if (split == data::Split::train) {
    snapshot.data_n_train = a.n;
  } else {
    snapshot.data_n_val = a.n;
  }

  ManifestIO mio;
  mio.command = "synth";
  mio.outputs = {a.out};

  const data::LabeledVideoSet set =
      a.task == "spatial" ? data::gen_spatial_task(a.seed, a.n, geo, classes, split, a.jitter_px)
                          : data::gen_temporal_task(a.seed, a.n, geo, classes, split);
  data::save_corpus(set, a.out);
  mio.path = (fs::path(a.out) / "run_manifest.txt").string();
  with_manifest(mio, snapshot, [&] {
    data::save_norm_stats(data::compute_norm_stats(set), (fs::path(a.out) / "norm.txt").string());
  });
  std::printf("wrote %d %s clips to %s\n", a.n, a.task.c_str(), a.out.c_str());
}

// ---- pretrain -------------------------------------------------------------

struct PretrainArgs {
  std::string modality, data, config, out;
  std::vector<std::string> sets;
};

void cmd_pretrain(const PretrainArgs& a) {
  if (a.modality != "image" && a.modality != "video") {
    throw std::invalid_argument("modality must be image or video");
  }
  RunConfig cfg = parse_config_file(a.config);
  apply_overrides(cfg, a.sets);

  const data::LabeledVideoSet corpus = data::load_corpus(a.data);
  if (corpus.clips.empty()) throw std::invalid_argument("corpus " + a.data + " is empty");
  const data::Geometry geo = corpus_geometry(corpus);
  const model::Modality modality =
      a.modality == "image" ? model::Modality::image : model::Modality::video;
  const model::ModelConfig mc = model_config_from(cfg, geo, modality);

  train::PretrainConfig pc;
  pc.mask_ratio = cfg.stage1_mask_ratio
                      ? *cfg.stage1_mask_ratio
                      : (modality == model::Modality::image ? 0.75 : 0.9);
  pc.epochs = cfg.stage1_epochs;
  pc.batch_size = cfg.stage1_batch_size;
  pc.base_lr = cfg.stage1_base_lr;
  pc.weight_decay = cfg.stage1_weight_decay;
  pc.beta1 = cfg.stage1_beta1;
  pc.beta2 = cfg.stage1_beta2;
  pc.warmup_fraction = cfg.stage1_warmup_fraction;
  pc.normalize_targets = cfg.stage1_normalize_targets;
  pc.seed = cfg.stage1_seed;
  train::validate_pretrain_config(pc);
  cfg.stage1_mask_ratio = pc.mask_ratio;  // resolved value for the manifest

  ManifestIO mio;
  mio.command = "pretrain";
  mio.inputs = {{"data", a.data}, {"modality", a.modality}};
  mio.outputs = {a.out};
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + a.out);
  mio.path = (fs::path(a.out) / "run_manifest.txt").string();

  with_manifest(mio, cfg, [&] {
    train::PretrainResult result = modality == model::Modality::image
                                       ? train::pretrain_image_teacher(corpus, mc, pc)
                                       : train::pretrain_video_teacher(corpus, mc, pc);
    model::save_checkpoint(result.encoder, a.out);
    train::save_stage1_log(result.log, (fs::path(a.out) / "train_log.csv").string());
    std::printf("pretrained %s teacher: %d epochs, final loss %.6f, params %s\n",
                a.modality.c_str(), pc.epochs, result.log.loss.back(),
                model::param_hash(result.encoder).c_str());
  });
}

// ---- distill --------------------------------------------------------------

struct DistillArgs {
  std::string data, out, config;
  std::string image_teacher, video_teacher;
  std::string baseline;
  double lambda_img = -1.0, lambda_vid = -1.0;  // <0 means not set on the CLI
  bool lambda_img_given = false, lambda_vid_given = false;
  double momentum = -1.0;
  bool pixel_branch = false;
  std::vector<std::string> sets;
};

void cmd_distill(const DistillArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : parse_config_file(a.config);
  apply_overrides(cfg, a.sets);
  if (a.pixel_branch) cfg.stage2_pixel_branch = true;

  const bool have_img = !a.image_teacher.empty();
  const bool have_vid = !a.video_teacher.empty();

  if (!a.baseline.empty() && a.baseline != "per-token" && a.baseline != "ema") {
    throw std::invalid_argument("baseline must be per-token or ema");
  }

  double lambda_img = a.lambda_img_given ? a.lambda_img
                                         : cfg.stage2_lambda_img.value_or(have_img ? 1.0 : 0.0);
  double lambda_vid = a.lambda_vid_given ? a.lambda_vid
                                         : cfg.stage2_lambda_vid.value_or(have_vid ? 1.0 : 0.0);
  if (a.baseline.empty()) {
    if ((lambda_img > 0.0) != have_img) {
      throw std::invalid_argument("lambda_img must be positive exactly when --image-teacher is given");
    }
    if ((lambda_vid > 0.0) != have_vid) {
      throw std::invalid_argument("lambda_vid must be positive exactly when --video-teacher is given");
    }
  } else if (a.baseline == "per-token") {
    if (static_cast<int>(have_img) + static_cast<int>(have_vid) != 1) {
      throw std::invalid_argument("per-token baseline takes exactly one teacher");
    }
  } else {
    if (have_img || have_vid) {
      throw std::invalid_argument("the ema baseline bootstraps its own teacher; drop the teacher flags");
    }
  }
  cfg.stage2_lambda_img = lambda_img;
  cfg.stage2_lambda_vid = lambda_vid;
  if (a.momentum >= 0.0) cfg.stage2_momentum = a.momentum;

  distill::DistillConfig dc;
  dc.lambda_img = lambda_img;
  dc.lambda_vid = lambda_vid;
  dc.mask_ratio = cfg.stage2_mask_ratio;
  dc.smooth_l1_beta = cfg.stage2_smooth_l1_beta;
  dc.pixel_branch = cfg.stage2_pixel_branch;
  dc.target_norm = cfg.stage2_target_norm == "layernorm" ? distill::TargetNorm::layernorm
                                                         : distill::TargetNorm::none;
  dc.epochs = cfg.stage2_epochs;
  dc.batch_size = cfg.stage2_batch_size;
  dc.base_lr = cfg.stage2_base_lr;
  dc.weight_decay = cfg.stage2_weight_decay;
  dc.beta1 = cfg.stage2_beta1;
  dc.beta2 = cfg.stage2_beta2;
  dc.warmup_fraction = cfg.stage2_warmup_fraction;
  dc.seed = cfg.stage2_seed;

  const data::LabeledVideoSet corpus = data::load_corpus(a.data);
  if (corpus.clips.empty()) throw std::invalid_argument("corpus " + a.data + " is empty");
  const data::Geometry geo = corpus_geometry(corpus);
  const model::ModelConfig student_cfg = model_config_from(cfg, geo, model::Modality::video);

  model::TransformerModel img_teacher, vid_teacher;
  if (have_img) {
    img_teacher = model::load_checkpoint(a.image_teacher);
    model::freeze(img_teacher);
  }
  if (have_vid) {
    vid_teacher = model::load_checkpoint(a.video_teacher);
    model::freeze(vid_teacher);
  }

  ManifestIO mio;
  mio.command = "distill";
  mio.inputs = {{"data", a.data}};
  if (have_img) {
    mio.inputs.push_back({"image_teacher", a.image_teacher + " hash=" + model::param_hash(img_teacher)});
  }
  if (have_vid) {
    mio.inputs.push_back({"video_teacher", a.video_teacher + " hash=" + model::param_hash(vid_teacher)});
  }
  if (!a.baseline.empty()) mio.inputs.push_back({"baseline", a.baseline});
  mio.outputs = {a.out};
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + a.out);
  mio.path = (fs::path(a.out) / "run_manifest.txt").string();

  with_manifest(mio, cfg, [&] {
    distill::DistillResult result;
    if (a.baseline == "per-token") {
      result = distill::per_token_distill(student_cfg, have_img ? img_teacher : vid_teacher, corpus, dc);
    } else if (a.baseline == "ema") {
      result = distill::ema_teacher_distill(student_cfg, corpus, dc, cfg.stage2_momentum);
    } else {
      distill::TeacherBundle teachers;
      if (have_img) teachers.image_teacher = &img_teacher;
      if (have_vid) teachers.video_teacher = &vid_teacher;
      result = distill::distill(student_cfg, teachers, corpus, dc);
    }
    model::save_checkpoint(result.student, a.out);
    train::save_stage2_log(result.log, (fs::path(a.out) / "train_log.csv").string());
    std::printf("distilled student: %d epochs, final loss %.6f, params %s\n", dc.epochs,
                result.log.loss.back(), model::param_hash(result.student).c_str());
  });
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string models, tasks, data_root, out, config;
  std::vector<std::string> sets;
};

// Usage and config problems exit 2; anything after resolution (including
// modality mismatches discovered mid-run) is a runtime failure, exit 1.
template <typename Fn>
void runtime_phase(Fn&& fn) {
  try {
    fn();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(e.what());
  }
}

void cmd_eval(const EvalArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : parse_config_file(a.config);
  apply_overrides(cfg, a.sets);
  const std::vector<std::string> model_paths = split_commas(a.models);
  const std::vector<std::string> task_tags = split_commas(a.tasks);
  if (model_paths.empty()) throw std::invalid_argument("--models needs at least one checkpoint");
  if (task_tags.empty()) throw std::invalid_argument("--tasks needs at least one task");

  eval::FinetuneConfig fc;
  fc.epochs = cfg.eval_epochs;
  fc.batch_size = cfg.eval_batch_size;
  fc.base_lr = cfg.eval_base_lr;
  fc.weight_decay = cfg.eval_weight_decay;
  fc.beta1 = cfg.eval_beta1;
  fc.beta2 = cfg.eval_beta2;
  fc.warmup_fraction = cfg.eval_warmup_fraction;
  fc.linear_probe = cfg.eval_linear_probe;
  fc.seed = cfg.eval_seed;
  if (fc.epochs < 1 || fc.batch_size < 1) {
    throw std::invalid_argument("eval epochs and batch_size must be >= 1");
  }

  ManifestIO mio;
  mio.command = "eval";
  mio.inputs = {{"data_root", a.data_root}};
  for (const std::string& p : model_paths) mio.inputs.push_back({"model", p});
  mio.outputs = {a.out};
  mio.path = a.out + ".manifest.txt";

  runtime_phase([&] {
    with_manifest(mio, cfg, [&] {
      std::vector<model::TransformerModel> models;
      models.reserve(model_paths.size());
      for (const std::string& p : model_paths) models.push_back(model::load_checkpoint(p));

      std::vector<data::LabeledVideoSet> trains, vals;
      trains.reserve(task_tags.size());
      vals.reserve(task_tags.size());
      for (const std::string& tag : task_tags) {
        trains.push_back(data::load_corpus((fs::path(a.data_root) / tag / "train").string()));
        vals.push_back(data::load_corpus((fs::path(a.data_root) / tag / "val").string()));
      }

      std::vector<eval::ModelEntry> model_entries;
      for (std::size_t i = 0; i < models.size(); ++i) {
        model_entries.push_back({path_tag(model_paths[i]), &models[i]});
      }
      std::vector<eval::TaskEntry> task_entries;
      for (std::size_t i = 0; i < task_tags.size(); ++i) {
        task_entries.push_back({task_tags[i], &trains[i], &vals[i]});
      }

      eval::EvalReport report = eval::compare_report(model_entries, task_entries, fc);
      eval::save_eval_report_csv(report, a.out);
      std::fputs(report.summary.c_str(), stdout);
    });
  });
}

// ---- analyze --------------------------------------------------------------

struct AnalyzeArgs {
  std::string model, data, out;
};

void cmd_analyze(const AnalyzeArgs& a) {
  ManifestIO mio;
  mio.command = "analyze";
  mio.inputs = {{"model", a.model}, {"data", a.data}};
  mio.outputs = {a.out};
  mio.path = a.out + ".manifest.txt";
  RunConfig snapshot;

  runtime_phase([&] {
    with_manifest(mio, snapshot, [&] {
      const model::TransformerModel m = model::load_checkpoint(a.model);
      const data::LabeledVideoSet set = data::load_corpus(a.data);
      const eval::AggregateSimilarity agg = eval::aggregate_similarity(m, set);
      eval::save_similarity_csv(agg.mean, a.out);
      std::printf("off_diagonal_mean=%.6f\n", agg.off_diagonal_mean);
    });
  });
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"masked pretraining and feature distillation on synthetic video"};
  app.require_subcommand(1);

  SynthArgs synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a synthetic video corpus");
  synth_cmd->add_option("--task", synth.task, "spatial or temporal")->required();
  synth_cmd->add_option("--n", synth.n, "number of clips")->required();
  synth_cmd->add_option("--seed", synth.seed, "corpus seed");
  synth_cmd->add_option("--out", synth.out, "output directory")->required();
  synth_cmd->add_option("--split", synth.split, "train or val");
  synth_cmd->add_option("--frames", synth.t, "frames per clip");
  synth_cmd->add_option("--height", synth.h, "frame height");
  synth_cmd->add_option("--width", synth.w, "frame width");
  synth_cmd->add_option("--channels", synth.c, "channels");
  synth_cmd->add_option("--class-count", synth.class_count, "override class count");
  synth_cmd->add_option("--jitter-px", synth.jitter_px, "spatial-task jitter");

  PretrainArgs pre;
  CLI::App* pre_cmd = app.add_subcommand("pretrain", "masked-pixel pretraining of a teacher");
  pre_cmd->add_option("--modality", pre.modality, "image or video")->required();
  pre_cmd->add_option("--data", pre.data, "corpus directory")->required();
  pre_cmd->add_option("--config", pre.config, "config file")->required();
  pre_cmd->add_option("--out", pre.out, "checkpoint directory")->required();
  pre_cmd->add_option("--set", pre.sets, "section.key=value override");

  DistillArgs dis;
  CLI::App* dis_cmd = app.add_subcommand("distill", "masked feature distillation of a student");
  dis_cmd->add_option("--data", dis.data, "corpus directory")->required();
  dis_cmd->add_option("--out", dis.out, "checkpoint directory")->required();
  dis_cmd->add_option("--config", dis.config, "config file");
  dis_cmd->add_option("--image-teacher", dis.image_teacher, "image teacher checkpoint");
  dis_cmd->add_option("--video-teacher", dis.video_teacher, "video teacher checkpoint");
  CLI::Option* li = dis_cmd->add_option("--lambda-img", dis.lambda_img, "image-teacher loss weight");
  CLI::Option* lv = dis_cmd->add_option("--lambda-vid", dis.lambda_vid, "video-teacher loss weight");
  dis_cmd->add_option("--baseline", dis.baseline, "per-token or ema");
  dis_cmd->add_option("--momentum", dis.momentum, "ema momentum");
  dis_cmd->add_flag("--pixel-branch", dis.pixel_branch, "add the pixel reconstruction branch");
  dis_cmd->add_option("--set", dis.sets, "section.key=value override");

  EvalArgs ev;
  CLI::App* ev_cmd = app.add_subcommand("eval", "finetune checkpoints on toy tasks and report top-1");
  ev_cmd->add_option("--models", ev.models, "comma-separated checkpoint dirs")->required();
  ev_cmd->add_option("--tasks", ev.tasks, "comma-separated task names under the data root")->required();
  ev_cmd->add_option("--data-root", ev.data_root, "directory with <task>/train and <task>/val")->required();
  ev_cmd->add_option("--out", ev.out, "report CSV path")->required();
  ev_cmd->add_option("--config", ev.config, "config file");
  ev_cmd->add_option("--set", ev.sets, "section.key=value override");

  AnalyzeArgs an;
  CLI::App* an_cmd = app.add_subcommand("analyze", "cross-frame feature similarity of a checkpoint");
  an_cmd->add_option("--model", an.model, "checkpoint directory")->required();
  an_cmd->add_option("--data", an.data, "corpus directory")->required();
  an_cmd->add_option("--out", an.out, "similarity CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  dis.lambda_img_given = li->count() > 0;
  dis.lambda_vid_given = lv->count() > 0;

  try {
    if (synth_cmd->parsed()) {
      cmd_synth(synth);
    } else if (pre_cmd->parsed()) {
      cmd_pretrain(pre);
    } else if (dis_cmd->parsed()) {
      cmd_distill(dis);
    } else if (ev_cmd->parsed()) {
      cmd_eval(ev);
    } else if (an_cmd->parsed()) {
      cmd_analyze(an);
    }
    return 0;
  } catch (const data::CorpusError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    const bool usage = e.kind == data::CorpusError::Kind::invalid_geometry ||
                       e.kind == data::CorpusError::Kind::unsupported_class_count;
    return usage ? 2 : 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace mvd::cli
