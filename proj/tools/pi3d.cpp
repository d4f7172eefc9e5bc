// Command-line front end for the full pipeline: dataset generation, decoder
// and triplane fitting, diffusion training, sampling, SDS refinement,
// rendering, mesh export and evaluation. The CLI only orchestrates; all
// parallelism lives inside the library modules. Flag values override config
// file entries, which override built-in defaults. Exit codes: 0 success,
// 1 validation error (including unknown flags), 2 runtime abort.
//
// Artifacts are deterministic in --seed: no wall-clock values are written to
// any output file.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pi3d/dataset.h"
#include "pi3d/diffusion.h"
#include "pi3d/fitting.h"
#include "pi3d/formats.h"
#include "pi3d/mesh.h"
#include "pi3d/metrics.h"
#include "pi3d/refine.h"
#include "pi3d/retrieval.h"

namespace {

using namespace pi3d;
using json = nlohmann::json;

// Thrown for bad arguments or malformed inputs detected before compute
// starts; mapped to exit code 1.
struct args_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

// --------------------------------------------------------------------------
// Option registration with config-file fallback. Every subcommand takes
// --seed, --config and --out; other options fall back to `key = value`
// entries in the config file (key = long flag name, dashes as underscores).

struct opt_set {
  CLI::App* cmd;
  std::string config_path;
  uint64_t seed = 0;
  std::string out = "out";
  std::vector<std::function<void(const config_map&)>> fallbacks;

  explicit opt_set(CLI::App* c) : cmd(c) {
    cmd->add_option("--seed", seed, "master RNG seed");
    cmd->add_option("--config", config_path, "flat key = value config file");
    cmd->add_option("--out", out, "output directory");
  }

  static std::string key_of(const std::string& flag) {
    std::string k = flag.substr(flag.find_first_not_of('-'));
    std::replace(k.begin(), k.end(), '-', '_');
    return k;
  }

  template <typename T>
  void add(const std::string& flag, T& value, const std::string& help) {
    CLI::Option* opt = cmd->add_option(flag, value, help);
    const std::string key = key_of(flag);
    fallbacks.push_back([opt, key, &value](const config_map& cfg) {
      if (opt->count() > 0 || !cfg.has(key)) return;
      if constexpr (std::is_same_v<T, std::string>)
        value = cfg.str(key, value);
      else if constexpr (std::is_same_v<T, bool>)
        value = cfg.getb(key, value);
      else if constexpr (std::is_floating_point_v<T>)
        value = T(cfg.getd(key, double(value)));
      else if constexpr (std::is_unsigned_v<T>)
        value = T(cfg.getu(key, uint64_t(value)));
      else
        value = T(cfg.geti(key, int64_t(value)));
    });
  }

  // called from the subcommand callback, before using any option value
  void resolve() {
    config_map cfg;
    if (!config_path.empty()) {
      if (!std::filesystem::exists(config_path))
        throw args_error("config file not found: " + config_path);
      cfg = config_map::from_file(config_path);
    }
    for (auto& f : fallbacks) f(cfg);
  }
};

void need_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw args_error(what + " path is required");
  if (!std::filesystem::exists(path))
    throw args_error(what + " not found: " + path);
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw args_error(msg);
}

caption_tokens tokens_of(const std::string& caption) {
  try {
    return tokenize_caption(caption);
  } catch (const std::exception& e) {
    throw args_error(std::string("bad caption: ") + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  std::ofstream f(path, std::ios::binary);
  check(bool(f), "cannot write " + path);
  f << j.dump(2) << "\n";
}

json read_json(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw args_error("cannot read " + path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw args_error(path + ": " + e.what());
  }
  return j;
}

std::string item_path(const std::string& dir, const char* stem, int idx) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d.tpln", stem, idx);
  return dir + "/" + buf;
}

// --------------------------------------------------------------------------
// Checkpoint bridging for the decoder and the denoiser.

void save_decoder_ckpt(const std::string& path,
                       const decoder_params<float>& dec) {
  named_tensor t;
  t.name = "decoder";
  t.shape = {uint32_t(dec.data.size())};
  t.data = dec.data;
  save_checkpoint(path, {t});
}

decoder_params<float> load_decoder_ckpt(const std::string& path) {
  const auto ts = load_checkpoint(path);
  const named_tensor& t = find_tensor(ts, "decoder");
  decoder_params<float> dec;
  if (t.data.size() != dec.data.size())
    throw args_error(path + ": decoder has " + std::to_string(t.data.size()) +
                     " parameters, expected " +
                     std::to_string(dec.data.size()));
  dec.data = t.data;
  return dec;
}

void save_model_ckpt(const std::string& path,
                     const denoiser_model<float>& model) {
  std::vector<named_tensor> ts;
  named_tensor meta;
  meta.name = "__config__";
  meta.shape = {8};
  const unet_config& c = model.cfg;
  for (int v : {c.in_ch, c.w0, c.w1, c.w2, c.emb_dim, c.heads, c.groups,
                c.t_steps})
    meta.data.push_back(float(v));
  ts.push_back(std::move(meta));
  for (const auto& [name, p] : model.params) {
    named_tensor t;
    t.name = name;
    for (int d : p->shape) t.shape.push_back(uint32_t(d));
    t.data = p->val;
    ts.push_back(std::move(t));
  }
  save_checkpoint(path, ts);
}

denoiser_model<float> load_model_ckpt(const std::string& path) {
  const auto ts = load_checkpoint(path);
  const named_tensor& meta = find_tensor(ts, "__config__");
  if (meta.data.size() != 8) throw args_error(path + ": bad model header");
  unet_config c;
  c.in_ch = int(meta.data[0]);
  c.w0 = int(meta.data[1]);
  c.w1 = int(meta.data[2]);
  c.w2 = int(meta.data[3]);
  c.emb_dim = int(meta.data[4]);
  c.heads = int(meta.data[5]);
  c.groups = int(meta.data[6]);
  c.t_steps = int(meta.data[7]);
  c.validate();
  auto model = make_denoiser<float>(c, 0);
  if (ts.size() != model.params.size() + 1)
    throw args_error(path + ": tensor count does not match the architecture");
  for (auto& [name, p] : model.params) {
    const named_tensor& t = find_tensor(ts, name);
    if (t.data.size() != p->val.size())
      throw args_error(path + ": shape mismatch for " + name);
    p->val = t.data;
  }
  return model;
}

// --------------------------------------------------------------------------
// items.json: the per-directory list tying triplane files to captions (and,
// for fits, to source objects and held-out metrics).

struct listed_item {
  std::string file;
  std::string caption;
  int object = -1;
};

std::vector<listed_item> read_items(const std::string& dir) {
  const json j = read_json(dir + "/items.json");
  if (!j.contains("items") || !j["items"].is_array())
    throw args_error(dir + "/items.json: missing items array");
  std::vector<listed_item> out;
  for (const auto& e : j["items"]) {
    listed_item it;
    it.file = dir + "/" + e.at("file").get<std::string>();
    it.caption = e.at("caption").get<std::string>();
    it.object = e.value("object", -1);
    need_file(it.file, "listed triplane");
    out.push_back(std::move(it));
  }
  require(!out.empty(), dir + "/items.json lists no items");
  return out;
}

// --------------------------------------------------------------------------
// gen-data

struct gen_data_opts {
  opt_set base;
  int scenes = 40, train_views = 30, heldout_views = 4;
  int img_res = 64, tp_res = 64;
  double single_prob = 0.5;

  explicit gen_data_opts(CLI::App* cmd) : base(cmd) {
    base.add("--scenes", scenes, "number of scenes");
    base.add("--train-views", train_views, "supervision views per scene");
    base.add("--heldout-views", heldout_views, "held-out views per scene");
    base.add("--img-res", img_res, "rendered view side in pixels");
    base.add("--tp-res", tp_res, "triplane resolution the fits will use");
    base.add("--single-prob", single_prob, "probability of a single-primitive scene");
  }
};

void run_gen_data(gen_data_opts& o) {
  o.base.resolve();
  require(o.scenes > 0 && o.train_views > 0 && o.heldout_views >= 0,
          "scene and view counts must be positive");
  require(o.img_res >= 8 && o.tp_res >= 8, "resolutions must be at least 8");
  require(o.single_prob >= 0 && o.single_prob <= 1,
          "--single-prob must be a probability");
  const auto t0 = std::chrono::steady_clock::now();
  dir_lock lock(o.base.out);

  std::vector<object_views> objects(size_t(o.scenes));
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int i = 0; i < o.scenes; ++i) {
    rng_stream rng(hash_mix(o.base.seed, 0x7363656eull, uint64_t(i)));
    const scene_spec s = sample_scene(rng, o.single_prob);
    objects[size_t(i)] =
        make_object_views(s, o.train_views, o.heldout_views, o.img_res,
                          o.img_res, o.tp_res,
                          hash_mix(o.base.seed, 0x6f626a76ull, uint64_t(i)));
  }
  save_dataset(o.base.out, objects, o.tp_res, o.base.seed);
  std::printf("gen-data: %d scenes, %d+%d views each, %.1f s\n", o.scenes,
              o.train_views, o.heldout_views, elapsed(t0));
}

// --------------------------------------------------------------------------
// train-decoder

struct train_decoder_opts {
  opt_set base;
  std::string data;
  int subset = 12, steps = 6000, rays = 4096, n_samples = 64;

  explicit train_decoder_opts(CLI::App* cmd) : base(cmd) {
    base.add("--data", data, "dataset directory from gen-data");
    base.add("--subset", subset, "objects in the joint training subset");
    base.add("--steps", steps, "total optimizer steps (round-robin)");
    base.add("--rays", rays, "rays per step");
    base.add("--n-samples", n_samples, "samples per ray");
  }
};

void run_train_decoder(train_decoder_opts& o) {
  o.base.resolve();
  need_file(o.data, "dataset");
  require(o.subset > 0 && o.steps > 0 && o.rays > 0 && o.n_samples > 0,
          "training budget values must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  auto objects = load_dataset(o.data);
  require(!objects.empty(), "dataset is empty");
  if (int(objects.size()) > o.subset) objects.resize(size_t(o.subset));
  dir_lock lock(o.base.out);

  fit_config<float> cfg;
  cfg.steps = o.steps;
  cfg.rays_per_step = o.rays;
  cfg.n_samples = o.n_samples;
  cfg.tp_res = objects.front().hulls.o_xy.h;
  cfg.seed = o.base.seed;
  auto result = train_shared_decoder(objects, cfg);

  save_decoder_ckpt(o.base.out + "/decoder.ckpt", result.decoder);
  json j;
  j["kind"] = "train-decoder";
  j["seed"] = o.base.seed;
  j["objects"] = objects.size();
  j["steps"] = o.steps;
  j["final_loss"] = double(result.step_total.back());
  write_json(o.base.out + "/report.json", j);
  std::printf("train-decoder: %zu objects, %d steps, final loss %.4f, %.1f s\n",
              objects.size(), o.steps, double(result.step_total.back()),
              elapsed(t0));
}

// --------------------------------------------------------------------------
// fit

struct fit_opts {
  opt_set base;
  std::string data, decoder;
  int steps = 2000, rays = 4096, n_samples = 64, scene = -1;

  explicit fit_opts(CLI::App* cmd) : base(cmd) {
    base.add("--data", data, "dataset directory from gen-data");
    base.add("--decoder", decoder, "shared decoder checkpoint");
    base.add("--steps", steps, "optimizer steps per object");
    base.add("--rays", rays, "rays per step");
    base.add("--n-samples", n_samples, "samples per ray");
    base.add("--scene", scene, "fit only this object index (-1 = all)");
  }
};

void run_fit(fit_opts& o) {
  o.base.resolve();
  need_file(o.data, "dataset");
  need_file(o.decoder, "decoder checkpoint");
  require(o.steps > 0 && o.rays > 0 && o.n_samples > 0,
          "training budget values must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  const auto dec = load_decoder_ckpt(o.decoder);
  const auto objects = load_dataset(o.data);
  require(o.scene < int(objects.size()), "--scene is out of range");
  dir_lock lock(o.base.out);

  const int lo = o.scene < 0 ? 0 : o.scene;
  const int hi = o.scene < 0 ? int(objects.size()) : o.scene + 1;
  json items = json::array();
  for (int i = lo; i < hi; ++i) {
    fit_config<float> cfg;
    cfg.steps = o.steps;
    cfg.rays_per_step = o.rays;
    cfg.n_samples = o.n_samples;
    cfg.tp_res = objects[size_t(i)].hulls.o_xy.h;
    cfg.seed = hash_mix(o.base.seed, 0x666974ull, uint64_t(i));
    auto [tp, rep] = fit_object(objects[size_t(i)], dec, cfg);
    const std::string file = item_path(o.base.out, "tp", i);
    save_triplane(file, tp);
    items.push_back({{"file", std::filesystem::path(file).filename().string()},
                     {"caption", objects[size_t(i)].caption},
                     {"object", i},
                     {"psnr", rep.held_psnr},
                     {"iou", rep.held_iou},
                     {"depth_mae", rep.held_depth_mae}});
    std::printf("fit: object %d/%d '%s' psnr=%.1f iou=%.3f mae=%.4f\n", i + 1,
                int(objects.size()), objects[size_t(i)].caption.c_str(),
                rep.held_psnr, rep.held_iou, rep.held_depth_mae);
  }
  json j;
  j["kind"] = "fit";
  j["seed"] = o.base.seed;
  j["items"] = std::move(items);
  write_json(o.base.out + "/items.json", j);
  std::printf("fit: %d objects, %.1f s\n", hi - lo, elapsed(t0));
}

// --------------------------------------------------------------------------
// train-diffusion

struct train_diffusion_opts {
  opt_set base;
  std::string data, triplanes;
  int steps = 2500, batch = 4;
  double p2d = 0.5, pdrop = 0.05, lr_plane = 1e-3, lr_rest = 1e-4, gamma = 5.0;
  int w0 = 64, w1 = 128, w2 = 256, emb_dim = 256, heads = 4, groups = 8,
      t_steps = 1000;

  explicit train_diffusion_opts(CLI::App* cmd) : base(cmd) {
    base.add("--data", data, "dataset directory (source of 2D views)");
    base.add("--triplanes", triplanes, "fitted triplane directory");
    base.add("--steps", steps, "training steps");
    base.add("--batch", batch, "triplanes per step (2D steps use 6x images)");
    base.add("--p2d", p2d, "probability of a 2D image batch");
    base.add("--pdrop", pdrop, "caption dropout for CFG");
    base.add("--lr-plane", lr_plane, "learning rate for plane embeddings");
    base.add("--lr-rest", lr_rest, "learning rate for everything else");
    base.add("--gamma", gamma, "Min-SNR clamp");
    base.add("--w0", w0, "U-Net width at full resolution");
    base.add("--w1", w1, "U-Net width at half resolution");
    base.add("--w2", w2, "U-Net width at quarter resolution");
    base.add("--emb-dim", emb_dim, "embedding width");
    base.add("--heads", heads, "attention heads");
    base.add("--groups", groups, "group-norm groups");
    base.add("--t-steps", t_steps, "diffusion timesteps");
  }
};

// Box-average a rendered view down to the pseudo-image side and rescale to
// [-1, 1], planar channel layout.
image_item<float> image_item_of(const view_record& view, int res,
                                const caption_tokens& caption) {
  const int f = view.rgb.h / res;
  check(f >= 1 && view.rgb.h == res * f && view.rgb.w == res * f,
        "view resolution must be a multiple of the pseudo-image side");
  image_item<float> item;
  item.caption = caption;
  item.pixels.resize(size_t(3) * res * res);
  const float inv = 1.0f / float(f * f);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        float acc = 0;
        for (int dy = 0; dy < f; ++dy)
          for (int dx = 0; dx < f; ++dx)
            acc += view.rgb.at(y * f + dy, x * f + dx, c);
        item.pixels[(size_t(c) * res + y) * res + x] =
            clamp(2.0f * acc * inv - 1.0f, -1.0f, 1.0f);
      }
  return item;
}

void run_train_diffusion(train_diffusion_opts& o) {
  o.base.resolve();
  need_file(o.triplanes, "triplane directory");
  require(o.steps > 0 && o.batch > 0, "training budget values must be positive");
  require(o.p2d >= 0 && o.p2d <= 1 && o.pdrop >= 0 && o.pdrop <= 1,
          "--p2d and --pdrop must be probabilities");
  require(o.p2d == 0.0 || !o.data.empty(),
          "--data is required when --p2d > 0 (2D views come from the dataset)");
  const auto t0 = std::chrono::steady_clock::now();

  const auto listed = read_items(o.triplanes);
  std::vector<triplane_item<float>> tri_corpus;
  for (const auto& it : listed) {
    triplane_item<float> item;
    item.tp = load_triplane(it.file);
    item.caption = tokens_of(it.caption);
    tri_corpus.push_back(std::move(item));
  }
  const int res = tri_corpus.front().tp.H;

  std::vector<image_item<float>> img_corpus;
  if (o.p2d > 0) {
    need_file(o.data, "dataset");
    const auto objects = load_dataset(o.data);
    for (const auto& obj : objects) {
      const caption_tokens caption = tokens_of(obj.caption);
      for (const auto& view : obj.train)
        img_corpus.push_back(image_item_of(view, res, caption));
    }
  }
  dir_lock lock(o.base.out);

  unet_config ucfg;
  ucfg.w0 = o.w0;
  ucfg.w1 = o.w1;
  ucfg.w2 = o.w2;
  ucfg.emb_dim = o.emb_dim;
  ucfg.heads = o.heads;
  ucfg.groups = o.groups;
  ucfg.t_steps = o.t_steps;
  ucfg.validate();
  auto model =
      make_denoiser<float>(ucfg, hash_mix(o.base.seed, 0x6d6f646cull));
  const auto sch = make_schedule<float>(o.t_steps);

  diffusion_config dcfg;
  dcfg.steps = o.steps;
  dcfg.batch_items = o.batch;
  dcfg.p_2d = o.p2d;
  dcfg.p_drop = o.pdrop;
  dcfg.lr_plane = o.lr_plane;
  dcfg.lr_rest = o.lr_rest;
  dcfg.gamma = o.gamma;
  dcfg.seed = o.base.seed;
  const auto rep = train_diffusion(model, tri_corpus, img_corpus, sch, dcfg);

  save_model_ckpt(o.base.out + "/model.ckpt", model);
  const int tail = std::min<int>(50, int(rep.losses.size()));
  double tail_loss = 0;
  for (int i = 0; i < tail; ++i)
    tail_loss += double(rep.losses[rep.losses.size() - 1 - size_t(i)]);
  tail_loss /= double(tail);
  json j;
  j["kind"] = "train-diffusion";
  j["seed"] = o.base.seed;
  j["steps"] = o.steps;
  j["triplanes"] = tri_corpus.size();
  j["images"] = img_corpus.size();
  j["params"] = model.param_count();
  j["tail_loss"] = tail_loss;
  write_json(o.base.out + "/report.json", j);
  std::printf(
      "train-diffusion: %zu triplanes + %zu images, %d steps, tail loss "
      "%.4f, %.1f s\n",
      tri_corpus.size(), img_corpus.size(), o.steps, tail_loss, elapsed(t0));
}

// --------------------------------------------------------------------------
// sample

struct sample_opts {
  opt_set base;
  std::string model, caption;
  int steps = 50, count = 1, res = 64;
  double cfg_scale = 5.0;

  explicit sample_opts(CLI::App* cmd) : base(cmd) {
    base.add("--model", model, "diffusion model checkpoint");
    base.add("--caption", caption, "caption to condition on");
    base.add("--steps", steps, "DDPM sampling steps");
    base.add("--cfg", cfg_scale, "classifier-free guidance scale");
    base.add("--count", count, "number of samples to draw");
    base.add("--res", res, "triplane resolution");
  }
};

void run_sample(sample_opts& o) {
  o.base.resolve();
  need_file(o.model, "model checkpoint");
  require(!o.caption.empty(), "--caption is required");
  require(o.steps >= 2, "--steps must be at least 2");
  require(o.count > 0, "--count must be positive");
  require(o.res > 0 && o.res % 4 == 0, "--res must be divisible by 4");
  require(o.cfg_scale >= 0, "--cfg must be non-negative");
  const caption_tokens tokens = tokens_of(o.caption);
  const auto t0 = std::chrono::steady_clock::now();
  auto model = load_model_ckpt(o.model);
  require(o.steps <= model.cfg.t_steps, "--steps exceeds the schedule length");
  const auto sch = make_schedule<float>(model.cfg.t_steps);
  dir_lock lock(o.base.out);

  json items = json::array();
  for (int i = 0; i < o.count; ++i) {
    const uint64_t seed = hash_mix(o.base.seed, 0x73616d70ull, uint64_t(i));
    auto tp = sample_triplane(model, sch, tokens, o.res, o.steps,
                              float(o.cfg_scale), seed);
    const std::string file = item_path(o.base.out, "sample", i);
    save_triplane(file, tp);
    items.push_back({{"file", std::filesystem::path(file).filename().string()},
                     {"caption", o.caption},
                     {"sample_seed", seed}});
  }
  json j;
  j["kind"] = "sample";
  j["seed"] = o.base.seed;
  j["steps"] = o.steps;
  j["cfg"] = o.cfg_scale;
  j["items"] = std::move(items);
  write_json(o.base.out + "/items.json", j);
  std::printf("sample: %d sample(s) of '%s', %d steps, cfg %.1f, %.1f s\n",
              o.count, o.caption.c_str(), o.steps, o.cfg_scale, elapsed(t0));
}

// --------------------------------------------------------------------------
// refine

struct refine_opts {
  opt_set base;
  std::string model, decoder, triplane, caption;
  int steps = 2000, img_res = 32, n_samples = 64;
  double cfg_scale = 20.0, t_min = 0.1, t_max = 0.5;
  double tp_lr = 5e-3, dec_lr = 1e-4, lambda_l2 = 0.025, lambda_tv = 0.025;

  explicit refine_opts(CLI::App* cmd) : base(cmd) {
    base.add("--model", model, "diffusion model checkpoint (guidance)");
    base.add("--decoder", decoder, "shared decoder checkpoint");
    base.add("--triplane", triplane, "triplane file to refine");
    base.add("--caption", caption, "caption to condition on");
    base.add("--steps", steps, "SDS optimization steps");
    base.add("--cfg", cfg_scale, "guidance scale");
    base.add("--t-min", t_min, "lower timestep fraction");
    base.add("--t-max", t_max, "upper timestep fraction");
    base.add("--img-res", img_res, "rendered view side");
    base.add("--n-samples", n_samples, "samples per ray");
    base.add("--tp-lr", tp_lr, "triplane learning rate");
    base.add("--dec-lr", dec_lr, "decoder-copy learning rate");
    base.add("--lambda-l2", lambda_l2, "L2 regularizer weight");
    base.add("--lambda-tv", lambda_tv, "TV regularizer weight");
  }
};

void run_refine(refine_opts& o) {
  o.base.resolve();
  need_file(o.model, "model checkpoint");
  need_file(o.decoder, "decoder checkpoint");
  need_file(o.triplane, "triplane");
  require(!o.caption.empty(), "--caption is required");
  require(o.steps > 0, "--steps must be positive");
  require(o.t_min >= 0 && o.t_min < o.t_max && o.t_max <= 1,
          "need 0 <= t-min < t-max <= 1");
  require(o.img_res > 0 && o.img_res % 4 == 0,
          "--img-res must be divisible by 4");
  require(o.cfg_scale >= 0, "--cfg must be non-negative");
  const caption_tokens tokens = tokens_of(o.caption);
  const auto t0 = std::chrono::steady_clock::now();
  auto model = load_model_ckpt(o.model);
  const auto dec = load_decoder_ckpt(o.decoder);
  auto tp = load_triplane(o.triplane);
  const auto sch = make_schedule<float>(model.cfg.t_steps);
  dir_lock lock(o.base.out);

  refine_config<float> rcfg;
  rcfg.steps = o.steps;
  rcfg.guidance = float(o.cfg_scale);
  rcfg.t_min = float(o.t_min);
  rcfg.t_max = float(o.t_max);
  rcfg.img_res = o.img_res;
  rcfg.n_samples = o.n_samples;
  rcfg.tp_lr = float(o.tp_lr);
  rcfg.dec_lr = float(o.dec_lr);
  rcfg.lambda_l2 = float(o.lambda_l2);
  rcfg.lambda_tv = float(o.lambda_tv);
  rcfg.seed = o.base.seed;
  const auto rep = refine(tp, dec, model, sch, tokens, rcfg);

  save_triplane(o.base.out + "/refined.tpln", tp);
  save_decoder_ckpt(o.base.out + "/decoder_refined.ckpt", rep.decoder);
  json j;
  j["kind"] = "refine";
  j["seed"] = o.base.seed;
  j["items"] = json::array({{{"file", "refined.tpln"},
                             {"caption", o.caption},
                             {"decoder", "decoder_refined.ckpt"}}});
  j["step_t"] = rep.step_t;
  j["step_gnorm"] = rep.step_gnorm;
  j["step_surrogate"] = rep.step_surrogate;
  write_json(o.base.out + "/items.json", j);
  std::printf("refine: %d steps on '%s', final |g| %.3e, %.1f s\n", o.steps,
              o.caption.c_str(), double(rep.step_gnorm.back()), elapsed(t0));
}

// --------------------------------------------------------------------------
// render

struct render_opts {
  opt_set base;
  std::string triplane, decoder;
  int views = 4, img_res = 128, n_samples = 128;
  double elevation = 15.0, azimuth = 0.0;

  explicit render_opts(CLI::App* cmd) : base(cmd) {
    base.add("--triplane", triplane, "triplane file");
    base.add("--decoder", decoder, "decoder checkpoint");
    base.add("--views", views, "orbit view count");
    base.add("--img-res", img_res, "image side in pixels");
    base.add("--n-samples", n_samples, "samples per ray");
    base.add("--elevation", elevation, "orbit elevation in degrees");
    base.add("--azimuth", azimuth, "azimuth of the first view in degrees");
  }
};

void run_render(render_opts& o) {
  o.base.resolve();
  need_file(o.triplane, "triplane");
  need_file(o.decoder, "decoder checkpoint");
  require(o.views > 0 && o.img_res > 0 && o.n_samples > 0,
          "view and resolution values must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  const auto tp = load_triplane(o.triplane);
  const auto dec = load_decoder_ckpt(o.decoder);
  dir_lock lock(o.base.out);

  const double deg = 3.14159265358979323846 / 180.0;
  sampling_config scfg;
  scfg.n_samples = o.n_samples;
  render_workspace<float> ws;
  for (int v = 0; v < o.views; ++v) {
    const double az = (o.azimuth + 360.0 * v / o.views) * deg;
    const camera_pose cam = orbit_camera(az, o.elevation * deg);
    const auto view =
        render_view(tp, dec, cam, o.img_res, o.img_res, scfg, ws);
    char stem[64];
    std::snprintf(stem, sizeof stem, "%s/view_%02d", o.base.out.c_str(), v);
    write_png_rgb8(std::string(stem) + "_rgb.png", quantize_rgb8(view.rgb));
    image2d<uint8_t> mask(view.mask.h, view.mask.w, 1);
    for (size_t i = 0; i < mask.data.size(); ++i)
      mask.data[i] = view.mask.data[i] > 0.5f;
    write_png_gray1(std::string(stem) + "_mask.png", mask);
    write_depth_raw(std::string(stem) + "_depth.raw", view.depth);
  }
  std::printf("render: %d views at %d px, %.1f s\n", o.views, o.img_res,
              elapsed(t0));
}

// --------------------------------------------------------------------------
// export-mesh

struct export_mesh_opts {
  opt_set base;
  std::string triplane, decoder;
  int grid_res = 96;

  explicit export_mesh_opts(CLI::App* cmd) : base(cmd) {
    base.add("--triplane", triplane, "triplane file");
    base.add("--decoder", decoder, "decoder checkpoint");
    base.add("--grid-res", grid_res, "marching-cubes grid side");
  }
};

void run_export_mesh(export_mesh_opts& o) {
  o.base.resolve();
  need_file(o.triplane, "triplane");
  need_file(o.decoder, "decoder checkpoint");
  require(o.grid_res >= 2, "--grid-res must be at least 2");
  const auto t0 = std::chrono::steady_clock::now();
  const auto tp = load_triplane(o.triplane);
  const auto dec = load_decoder_ckpt(o.decoder);
  dir_lock lock(o.base.out);

  const auto mesh = export_mesh(tp, dec, o.grid_res);
  write_ply(o.base.out + "/mesh.ply", mesh);
  std::printf("export-mesh: %zu vertices, %zu faces, %.1f s\n",
              mesh.vertices.size(), mesh.faces.size(), elapsed(t0));
}

// --------------------------------------------------------------------------
// eval

struct eval_opts {
  opt_set base;
  std::string triplanes, decoder, data;
  int n_samples = 64, probe_res = 32;

  explicit eval_opts(CLI::App* cmd) : base(cmd) {
    base.add("--triplanes", triplanes, "directory with items.json");
    base.add("--decoder", decoder, "decoder checkpoint");
    base.add("--data", data, "dataset directory (adds held-out metrics)");
    base.add("--n-samples", n_samples, "samples per ray");
    base.add("--probe-res", probe_res, "retrieval probe resolution");
  }
};

void run_eval(eval_opts& o) {
  o.base.resolve();
  need_file(o.triplanes, "triplane directory");
  need_file(o.decoder, "decoder checkpoint");
  require(o.n_samples > 0 && o.probe_res >= 8, "bad evaluation resolution");
  const auto t0 = std::chrono::steady_clock::now();
  const auto dec = load_decoder_ckpt(o.decoder);
  const auto listed = read_items(o.triplanes);
  std::vector<object_views> objects;
  if (!o.data.empty()) {
    need_file(o.data, "dataset");
    objects = load_dataset(o.data);
    for (const auto& it : listed)
      require(it.object < int(objects.size()),
              "listed object index exceeds the dataset");
  }
  dir_lock lock(o.base.out);

  const auto index = build_retrieval_index(enumerate_captions(), o.probe_res);
  sampling_config scfg;
  scfg.n_samples = o.n_samples;
  render_workspace<float> ws;

  json entries = json::array();
  std::vector<retrieval_result> results;
  double sum_psnr = 0, sum_iou = 0, sum_mae = 0;
  int n_fit = 0;
  for (const auto& it : listed) {
    const auto tp = load_triplane(it.file);
    const auto r = retrieve_caption(tp, dec, it.caption, index, o.n_samples);
    results.push_back(r);
    json e = {{"file", std::filesystem::path(it.file).filename().string()},
              {"caption", it.caption},
              {"rank", r.rank},
              {"score", r.true_score},
              {"degenerate", r.degenerate}};
    if (!objects.empty() && it.object >= 0) {
      const object_views& obj = objects[size_t(it.object)];
      double p = 0, iou = 0, mae = 0;
      for (const view_record& v : obj.heldout) {
        const auto view =
            render_view(tp, dec, v.camera, obj.img_h, obj.img_w, scfg, ws);
        p += psnr(view.rgb, v.rgb);
        iou += mask_iou(view.mask, v.mask);
        mae += depth_mae(view.depth, v.depth, v.mask);
      }
      const double nv = double(obj.heldout.size());
      e["psnr"] = p / nv;
      e["iou"] = iou / nv;
      e["depth_mae"] = mae / nv;
      sum_psnr += p / nv;
      sum_iou += iou / nv;
      sum_mae += mae / nv;
      ++n_fit;
    }
    entries.push_back(std::move(e));
  }
  const auto summary = summarize_retrieval(results);

  json j;
  j["kind"] = "eval";
  j["seed"] = o.base.seed;
  j["entries"] = std::move(entries);
  j["r_at_1"] = summary.r_at_1;
  j["r_at_10"] = summary.r_at_10;
  j["evaluated"] = summary.evaluated;
  j["degenerate"] = summary.degenerate;
  if (n_fit > 0) {
    j["mean_psnr"] = sum_psnr / n_fit;
    j["mean_iou"] = sum_iou / n_fit;
    j["mean_depth_mae"] = sum_mae / n_fit;
  }
  write_json(o.base.out + "/metrics.json", j);
  std::printf("eval: %d item(s), R@1 %.3f, R@10 %.3f, %d degenerate, %.1f s\n",
              summary.evaluated, summary.r_at_1, summary.r_at_10,
              summary.degenerate, elapsed(t0));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale triplane diffusion pipeline"};
  app.require_subcommand(1);

  gen_data_opts gen(app.add_subcommand("gen-data", "generate an oracle dataset"));
  train_decoder_opts tdec(
      app.add_subcommand("train-decoder", "train the shared decoder"));
  fit_opts fit(app.add_subcommand("fit", "fit triplanes with the frozen decoder"));
  train_diffusion_opts tdiff(
      app.add_subcommand("train-diffusion", "train the denoiser on pseudo-images"));
  sample_opts sample(app.add_subcommand("sample", "sample triplanes from captions"));
  refine_opts refine(app.add_subcommand("refine", "SDS-refine a sampled triplane"));
  render_opts render(app.add_subcommand("render", "render orbit views"));
  export_mesh_opts mesh(app.add_subcommand("export-mesh", "extract a colored mesh"));
  eval_opts eval(app.add_subcommand("eval", "held-out metrics and oracle retrieval"));

  app.get_subcommand("gen-data")->callback([&] { run_gen_data(gen); });
  app.get_subcommand("train-decoder")->callback([&] { run_train_decoder(tdec); });
  app.get_subcommand("fit")->callback([&] { run_fit(fit); });
  app.get_subcommand("train-diffusion")->callback([&] { run_train_diffusion(tdiff); });
  app.get_subcommand("sample")->callback([&] { run_sample(sample); });
  app.get_subcommand("refine")->callback([&] { run_refine(refine); });
  app.get_subcommand("render")->callback([&] { run_render(render); });
  app.get_subcommand("export-mesh")->callback([&] { run_export_mesh(mesh); });
  app.get_subcommand("eval")->callback([&] { run_eval(eval); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return 0;
    }
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const args_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
