// Command-line entry point: dataset generation, decomposition, training, and
// the task-level editing operations, all deterministic under pinned seeds.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "composer/checkpoint.hpp"
#include "composer/compose.hpp"
#include "composer/dataset.hpp"
#include "composer/decompose.hpp"
#include "composer/image.hpp"
#include "composer/pilot.hpp"
#include "composer/serialize.hpp"
#include "composer/trainer.hpp"
#include "composer/vocab.hpp"

namespace fs = std::filesystem;
using namespace composer;

namespace {

// ---------------------------------------------------------------------------
// Shared input helpers.

// Loads an image source; when the .ppm sits next to its ground-truth files
// (stem.depth.ctsr, stem.inst.ctsr, stem.caption.txt) the full record becomes
// available, unlocking the caption/depth/instances slots.
Source resolve_source(const fs::path& image_path) {
  Tensor image = load_ppm(image_path);
  fs::path stem = image_path;
  stem.replace_extension();
  fs::path depth_p = stem.string() + ".depth.ctsr";
  fs::path inst_p = stem.string() + ".inst.ctsr";
  fs::path cap_p = stem.string() + ".caption.txt";
  if (fs::exists(depth_p) && fs::exists(inst_p) && fs::exists(cap_p)) {
    DatasetRecord rec;
    rec.image = std::move(image);
    rec.depth = load_ctsr(depth_p);
    rec.instances = load_ctsr(inst_p);
    std::ifstream cap(cap_p);
    if (!cap) throw IoError("cannot read " + cap_p.string());
    std::getline(cap, rec.caption_text);
    rec.caption = tokenize(rec.caption_text);
    return record_source(std::move(rec));
  }
  return image_source(std::move(image));
}

// A mask PPM is exact black/white; channel 0 carries the editable region.
Tensor load_mask(const fs::path& path) {
  Tensor img = load_ppm(path);
  int64_t hw = img.dim(1) * img.dim(2);
  auto mask = Tensor::zeros({1, img.dim(1), img.dim(2)});
  for (int64_t p = 0; p < hw; ++p) {
    float v = img.ptr()[p];
    if (v != 0.f && v != 1.f)
      throw ContractError("mask image must be pure black/white: " +
                          path.string());
    mask.ptr()[p] = v;
  }
  return mask;
}

Tensor load_palette_txt(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open palette file " + path.string());
  auto pal = Tensor::zeros({kPaletteBins});
  std::vector<bool> seen(kPaletteBins, false);
  int64_t idx;
  double val;
  while (in >> idx >> val) {
    if (idx < 0 || idx >= kPaletteBins)
      throw IoError("palette index out of range in " + path.string());
    pal.ptr()[idx] = float(val);
    seen[size_t(idx)] = true;
  }
  for (bool s : seen)
    if (!s) throw IoError("palette file missing bins: " + path.string());
  return pal;
}

void save_palette_txt(const fs::path& path, const Tensor& pal) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  char buf[64];
  for (int64_t i = 0; i < pal.numel(); ++i) {
    std::snprintf(buf, sizeof buf, "%lld %.9g\n", (long long)i,
                  double(pal.ptr()[i]));
    out << buf;
  }
}

// Palette from either a palette.txt or any image (its histogram).
Tensor resolve_palette(const std::string& value) {
  fs::path p(value);
  if (p.extension() == ".ppm") return color_histogram(load_ppm(p));
  return load_palette_txt(p);
}

std::vector<Slot> parse_slot_list(const std::string& csv) {
  std::vector<Slot> out;
  std::string cur;
  std::istringstream ss(csv);
  while (std::getline(ss, cur, ','))
    if (!cur.empty()) out.push_back(parse_slot(cur));
  return out;
}

// One `--cond slot=source[:subslot]` assignment applied onto a bundle.
// Sources: a .ppm extracts the slot from that image; a .ctsr loads the raw
// tensor; palettes also accept palette.txt; captions take literal text or a
// text file. The masked slot needs `image.ppm:mask.ppm`.
void apply_cond(Bundle& bundle, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ContractError("--cond needs slot=source, got: " + assignment);
  Slot slot = parse_slot(assignment.substr(0, eq));
  std::string value = assignment.substr(eq + 1);
  if (bundle.has(slot))
    throw ContractError(std::string("condition slot set twice: ") +
                        slot_name(slot));

  if (slot == Slot::kCaption) {
    std::string text = value;
    if (fs::exists(value) && fs::is_regular_file(value)) {
      std::ifstream in(value);
      std::getline(in, text);
    }
    bundle.caption = tokenize(text);
    return;
  }
  if (slot == Slot::kMasked) {
    auto colon = value.rfind(':');
    if (colon == std::string::npos)
      throw ContractError("--cond masked needs image.ppm:mask.ppm");
    Tensor image = load_ppm(value.substr(0, colon));
    Tensor mask = load_mask(value.substr(colon + 1));
    bundle.masked = make_masked(image, mask);
    return;
  }
  fs::path p(value);
  if (p.extension() == ".ctsr") {
    Tensor t = load_ctsr(p);
    switch (slot) {
      case Slot::kSemantic: bundle.semantic = std::move(t); break;
      case Slot::kPalette: bundle.palette = std::move(t); break;
      case Slot::kSketch: bundle.sketch = std::move(t); break;
      case Slot::kInstances: bundle.instances = std::move(t); break;
      case Slot::kDepth: bundle.depth = std::move(t); break;
      case Slot::kIntensity: bundle.intensity = std::move(t); break;
      default: break;
    }
    return;
  }
  if (slot == Slot::kPalette && p.extension() == ".txt") {
    bundle.palette = load_palette_txt(p);
    return;
  }
  Source src = resolve_source(p);
  extract_slot(bundle, src, slot, std::nullopt);
}

Bundle bundle_from_conds(const std::vector<std::string>& conds) {
  Bundle b;
  for (const auto& c : conds) apply_cond(b, c);
  b.validate();
  return b;
}

Sampler load_sampler(const std::string& ckpt, bool live) {
  return make_sampler(load_checkpoint(ckpt), !live);
}

void write_image(const fs::path& out, const Tensor& image) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_ppm(out, image);
  std::cout << out.string() << '\n';
}

// Dropout counters ride the checkpoint config so resumed runs keep counting.
void stats_to_config(const DropoutStats& st,
                     std::map<std::string, std::string>& kv) {
  kv["dropout.draws"] = std::to_string(st.draws);
  kv["dropout.none"] = std::to_string(st.none_mode);
  kv["dropout.all"] = std::to_string(st.all_mode);
  for (Slot s : all_slots())
    kv[std::string("dropout.kept.") + slot_name(s)] =
        std::to_string(st.kept[size_t(s)]);
}

void stats_from_config(const std::map<std::string, std::string>& kv,
                       DropoutStats& st) {
  auto get = [&](const std::string& k) -> int64_t {
    auto it = kv.find(k);
    return it == kv.end() ? 0 : std::stoll(it->second);
  };
  st.draws = get("dropout.draws");
  st.none_mode = get("dropout.none");
  st.all_mode = get("dropout.all");
  for (Slot s : all_slots())
    st.kept[size_t(s)] = get(std::string("dropout.kept.") + slot_name(s));
}

// ---------------------------------------------------------------------------
// Training loop shared by `train` and `acceptance-prepare`.

struct TrainDriver {
  UNetConfig ucfg;
  TrainConfig tcfg;
  fs::path ckpt_dir;
  fs::path log_path;

  // Runs (or resumes) until tcfg.steps, pulling each batch from next_batch.
  template <typename NextBatch>
  void run(NextBatch&& next_batch) {
    std::unique_ptr<Trainer> tr;
    bool resumed = false;
    if (fs::exists(ckpt_dir / "manifest.txt")) {
      Checkpoint ck = load_checkpoint(ckpt_dir);
      UNetConfig u = decode_unet_config(ck.config);
      TrainConfig t = decode_train_config(ck.config);
      t.steps = tcfg.steps;  // the target may have been raised
      tr = std::make_unique<Trainer>(u, t, std::move(ck.live),
                                     std::move(ck.ema), std::move(ck.adam),
                                     ck.step);
      stats_from_config(ck.config, tr->dropout_stats());
      resumed = true;
      std::cerr << "resuming from step " << ck.step << "\n";
    } else {
      tr = std::make_unique<Trainer>(ucfg, tcfg);
    }
    if (tr->step() >= tr->train_config().steps) {
      std::cout << "checkpoint already trained to step " << tr->step() << ": "
                << ckpt_dir.string() << '\n';
      return;
    }

    fs::create_directories(ckpt_dir);
    std::ofstream log(log_path, resumed ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write " + log_path.string());
    if (!resumed) log << "step,loss,grad_norm\n";

    char row[96];
    auto save = [&](const Trainer& t) {
      Checkpoint ck;
      ck.live = param_clone(const_cast<Trainer&>(t).live());
      ck.ema = param_clone(const_cast<Trainer&>(t).ema());
      ck.adam = const_cast<Trainer&>(t).adam();
      ck.step = t.step();
      ck.config = encode_unet_config(t.unet_config());
      for (auto& [k, v] : encode_train_config(t.train_config()))
        ck.config[k] = v;
      stats_to_config(t.dropout_stats(), ck.config);
      save_checkpoint(ckpt_dir, ck);
    };

    const int64_t total = tr->train_config().steps;
    while (tr->step() < total) {
      auto stats = tr->train_step(next_batch(tr->step()));
      std::snprintf(row, sizeof row, "%lld,%.6f,%.6f\n",
                    (long long)tr->step(), stats.loss, stats.grad_norm);
      log << row;
      log.flush();
      if (tr->step() % 25 == 0 || tr->step() == total)
        std::cerr << "step " << tr->step() << "/" << total << "  loss "
                  << stats.loss << "  grad " << stats.grad_norm << "\n";
      if (tr->step() % tr->train_config().checkpoint_every == 0 ||
          tr->step() == total)
        save(*tr);
    }
    std::cout << ckpt_dir.string() << '\n';
  }
};

// ---------------------------------------------------------------------------
// Verbs.

int cmd_gen_data(int64_t n, uint64_t seed, const fs::path& out) {
  std::vector<DatasetRecord> records;
  records.reserve(size_t(n));
  for (int64_t i = 0; i < n; ++i)
    records.push_back(gen_scene(seed + uint64_t(i)));
  write_dataset(out, records);
  std::cout << out.string() << '\n';
  return 0;
}

int cmd_decompose(const fs::path& image_path, const fs::path& out) {
  Source src = resolve_source(image_path);
  fs::create_directories(out);
  Bundle b;
  for (Slot s : extractable_slots(src))
    extract_slot(b, src, s, std::nullopt);
  if (b.semantic) save_ctsr(out / "semantic.ctsr", *b.semantic);
  if (b.palette) {
    save_ctsr(out / "palette.ctsr", *b.palette);
    save_palette_txt(out / "palette.txt", *b.palette);
  }
  if (b.sketch) save_ctsr(out / "sketch.ctsr", *b.sketch);
  if (b.intensity) save_ctsr(out / "intensity.ctsr", *b.intensity);
  if (b.depth) save_ctsr(out / "depth.ctsr", *b.depth);
  if (b.instances) save_ctsr(out / "instances.ctsr", *b.instances);
  if (src.has_caption) {
    std::ofstream cap(out / "caption.txt", std::ios::trunc);
    cap << src.record.caption_text << '\n';
  }
  std::cout << out.string() << '\n';
  return 0;
}

int cmd_train(const fs::path& data, int64_t steps, const std::string& config,
              const fs::path& out) {
  UNetConfig ucfg;
  TrainConfig tcfg;
  if (!config.empty()) {
    auto kv = read_kv_file(config);
    if (kv.count("unet.base_channels")) ucfg = decode_unet_config(kv);
    if (kv.count("train.lr")) tcfg = decode_train_config(kv);
  }
  if (steps > 0) tcfg.steps = steps;
  ucfg.validate();
  tcfg.validate();

  auto records = load_dataset(data);
  TrainDriver driver{ucfg, tcfg, out, out / "train_log.csv"};
  driver.run([&](int64_t step) {
    std::vector<DatasetRecord> batch;
    batch.reserve(size_t(tcfg.batch_size));
    for (int64_t j = 0; j < tcfg.batch_size; ++j)
      batch.push_back(
          records[size_t((step * tcfg.batch_size + j) % int64_t(records.size()))]);
    return batch;
  });
  return 0;
}

int cmd_acceptance_prepare(const fs::path& out) {
  auto prof = pilot_profile();
  TrainDriver driver{prof.unet, prof.train, out / "ckpt",
                     out / "train_log.csv"};
  driver.run([&](int64_t step) { return pilot_batch(prof, step); });
  return 0;
}

struct SamplingArgs {
  std::string ckpt;
  int64_t steps = 50;
  double omega = 3.0;
  uint64_t seed = 0;
  bool live = false;
  std::string out;
};

void add_sampling_args(CLI::App* cmd, SamplingArgs& a, bool with_omega = true,
                       bool with_seed = true) {
  cmd->add_option("--ckpt", a.ckpt, "checkpoint directory")->required();
  cmd->add_option("--steps", a.steps, "sampling steps")->capture_default_str();
  if (with_omega)
    cmd->add_option("--omega", a.omega, "guidance weight")
        ->capture_default_str();
  if (with_seed)
    cmd->add_option("--seed", a.seed, "rng seed")->capture_default_str();
  cmd->add_flag("--live", a.live, "sample live instead of EMA weights");
  cmd->add_option("--out", a.out, "output file")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compositional conditional diffusion toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gd = app.add_subcommand("gen-data", "write a procedural dataset");
  int64_t gd_n = 0;
  uint64_t gd_seed = 0;
  std::string gd_out;
  gd->add_option("--n", gd_n, "number of records")->required();
  gd->add_option("--seed", gd_seed, "base seed")->capture_default_str();
  gd->add_option("--out", gd_out, "output directory")->required();

  // decompose
  auto* dc = app.add_subcommand("decompose",
                                "extract every representation of an image");
  std::string dc_image, dc_out;
  dc->add_option("--image", dc_image, "input .ppm")->required();
  dc->add_option("--out", dc_out, "output directory")->required();

  // train
  auto* tn = app.add_subcommand("train", "train a denoiser on a dataset");
  std::string tn_data, tn_config, tn_out;
  int64_t tn_steps = 0;
  tn->add_option("--data", tn_data, "dataset directory")->required();
  tn->add_option("--steps", tn_steps, "override total steps");
  tn->add_option("--config", tn_config, "key=value config file");
  tn->add_option("--out", tn_out, "checkpoint directory")->required();

  // sample
  auto* sp = app.add_subcommand("sample", "generate from conditions");
  SamplingArgs sp_a;
  std::vector<std::string> sp_conds;
  std::string sp_latent;
  add_sampling_args(sp, sp_a);
  sp->add_option("--cond", sp_conds, "slot=source[:subslot] assignments");
  sp->add_option("--latent", sp_latent, "start from a .ctsr latent");

  // variations
  auto* vr = app.add_subcommand("variations",
                                "regenerate from a subset of an image's "
                                "representations");
  SamplingArgs vr_a;
  std::string vr_image, vr_subset = "all";
  add_sampling_args(vr, vr_a);
  vr->add_option("--image", vr_image, "source image")->required();
  vr->add_option("--subset", vr_subset,
                 "comma-separated slots, 'all', or 'none'")
      ->capture_default_str();

  // interpolate
  auto* ip = app.add_subcommand("interpolate",
                                "blend the global representations of two "
                                "images");
  SamplingArgs ip_a;
  std::string ip_a_img, ip_b_img, ip_kept;
  double ip_lambda = 0.5;
  add_sampling_args(ip, ip_a);
  ip->add_option("--image-a", ip_a_img, "endpoint A")->required();
  ip->add_option("--image-b", ip_b_img, "endpoint B")->required();
  ip->add_option("--kept", ip_kept, "slots pinned to A");
  ip->add_option("--lambda", ip_lambda, "blend position in [0,1]")
      ->capture_default_str();

  // reconfigure
  auto* rc = app.add_subcommand("reconfigure",
                                "invert under the image's conditions, "
                                "resample with overrides");
  SamplingArgs rc_a;
  std::string rc_image;
  std::vector<std::string> rc_conds, rc_drop;
  double rc_omega_invert = 1.0, rc_omega_sample = 1.0;
  add_sampling_args(rc, rc_a, /*with_omega=*/false, /*with_seed=*/false);
  rc->add_option("--image", rc_image, "source image")->required();
  rc->add_option("--cond", rc_conds, "slot overrides for the resample");
  rc->add_option("--drop", rc_drop, "slots removed for the resample");
  rc->add_option("--omega-invert", rc_omega_invert,
                 "guidance during inversion")
      ->capture_default_str();
  rc->add_option("--omega-sample", rc_omega_sample,
                 "guidance during resampling")
      ->capture_default_str();

  // region-edit
  auto* re = app.add_subcommand("region-edit",
                                "regenerate inside a mask, preserve outside");
  SamplingArgs re_a;
  std::string re_image, re_mask;
  std::vector<std::string> re_conds;
  add_sampling_args(re, re_a);
  re->add_option("--image", re_image, "source image")->required();
  re->add_option("--mask", re_mask, "editable region (black/white .ppm)")
      ->required();
  re->add_option("--cond", re_conds, "extra condition assignments");

  // colorize
  auto* cl = app.add_subcommand("colorize", "recolor toward a target palette");
  SamplingArgs cl_a;
  std::string cl_image, cl_palette, cl_method = "reconfigure";
  add_sampling_args(cl, cl_a);
  cl->add_option("--image", cl_image, "source image")->required();
  cl->add_option("--palette", cl_palette, "palette.txt or reference .ppm")
      ->required();
  cl->add_option("--method", cl_method, "reconfigure|direct")
      ->capture_default_str();

  // invert
  auto* iv = app.add_subcommand("invert",
                                "recover the latent that regenerates an "
                                "image");
  SamplingArgs iv_a;
  std::string iv_image, iv_subset = "all";
  add_sampling_args(iv, iv_a, /*with_omega=*/false, /*with_seed=*/false);
  iv->add_option("--image", iv_image, "source image")->required();
  iv->add_option("--subset", iv_subset, "conditioning slots")
      ->capture_default_str();

  // acceptance-prepare
  auto* ap = app.add_subcommand("acceptance-prepare",
                                "run (or resume) the pinned pilot training");
  std::string ap_out;
  ap->add_option("--out", ap_out, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gd->parsed()) return cmd_gen_data(gd_n, gd_seed, gd_out);
    if (dc->parsed()) return cmd_decompose(dc_image, dc_out);
    if (tn->parsed()) return cmd_train(tn_data, tn_steps, tn_config, tn_out);
    if (ap->parsed()) return cmd_acceptance_prepare(ap_out);

    if (sp->parsed()) {
      auto sampler = load_sampler(sp_a.ckpt, sp_a.live);
      Bundle cond = bundle_from_conds(sp_conds);
      Tensor img = sp_latent.empty()
                       ? generate(sampler, cond, sp_a.omega, sp_a.steps,
                                  sp_a.seed)
                       : sample_from_latent(sampler, load_ctsr(sp_latent),
                                            cond, sp_a.steps, sp_a.omega);
      write_image(sp_a.out, img);
      return 0;
    }
    if (vr->parsed()) {
      auto sampler = load_sampler(vr_a.ckpt, vr_a.live);
      Source src = resolve_source(vr_image);
      std::vector<Slot> subset =
          vr_subset == "all" ? extractable_slots(src)
          : vr_subset == "none" ? std::vector<Slot>{}
                                : parse_slot_list(vr_subset);
      Bundle full;
      for (Slot s : subset) extract_slot(full, src, s, std::nullopt);
      full.validate();
      write_image(vr_a.out, variations(sampler, full, subset, vr_a.omega,
                                       vr_a.steps, vr_a.seed));
      return 0;
    }
    if (ip->parsed()) {
      auto sampler = load_sampler(ip_a.ckpt, ip_a.live);
      Source sa = resolve_source(ip_a_img);
      Source sb = resolve_source(ip_b_img);
      Bundle ba, bb;
      for (Slot s : extractable_slots(sa))
        extract_slot(ba, sa, s, std::nullopt);
      for (Slot s : extractable_slots(sb))
        extract_slot(bb, sb, s, std::nullopt);
      write_image(ip_a.out,
                  interpolate(sampler, ba, bb, parse_slot_list(ip_kept),
                              ip_lambda, ip_a.omega, ip_a.steps, ip_a.seed));
      return 0;
    }
    if (rc->parsed()) {
      auto sampler = load_sampler(rc_a.ckpt, rc_a.live);
      Source src = resolve_source(rc_image);
      Bundle ci;
      for (Slot s : extractable_slots(src))
        extract_slot(ci, src, s, std::nullopt);
      ci.validate();
      Bundle cj = ci;
      for (const auto& d : rc_drop) cj.drop(parse_slot(d));
      for (const auto& c : rc_conds) {
        auto eq = c.find('=');
        if (eq != std::string::npos) cj.drop(parse_slot(c.substr(0, eq)));
        apply_cond(cj, c);
      }
      cj.validate();
      write_image(rc_a.out,
                  reconfigure(sampler, src.record.image, ci, cj, rc_a.steps,
                              rc_omega_invert, rc_omega_sample));
      return 0;
    }
    if (re->parsed()) {
      auto sampler = load_sampler(re_a.ckpt, re_a.live);
      Tensor image = load_ppm(re_image);
      Tensor mask = load_mask(re_mask);
      Bundle cond = bundle_from_conds(re_conds);
      write_image(re_a.out, region_edit(sampler, image, mask, cond,
                                        re_a.omega, re_a.steps, re_a.seed));
      return 0;
    }
    if (cl->parsed()) {
      auto sampler = load_sampler(cl_a.ckpt, cl_a.live);
      Tensor image = load_ppm(cl_image);
      Tensor palette = resolve_palette(cl_palette);
      Tensor out;
      if (cl_method == "direct") {
        out = colorize_direct(sampler, image, palette, cl_a.omega, cl_a.steps,
                              cl_a.seed);
      } else if (cl_method == "reconfigure") {
        Source src = resolve_source(cl_image);
        Bundle deco;
        for (Slot s : extractable_slots(src))
          extract_slot(deco, src, s, std::nullopt);
        deco.validate();
        out = colorize(sampler, image, deco, palette, cl_a.steps);
      } else {
        throw ContractError("colorize: unknown --method " + cl_method);
      }
      write_image(cl_a.out, out);
      return 0;
    }
    if (iv->parsed()) {
      auto sampler = load_sampler(iv_a.ckpt, iv_a.live);
      Source src = resolve_source(iv_image);
      std::vector<Slot> subset =
          iv_subset == "all" ? extractable_slots(src)
          : iv_subset == "none" ? std::vector<Slot>{}
                                : parse_slot_list(iv_subset);
      Bundle cond;
      for (Slot s : subset) extract_slot(cond, src, s, std::nullopt);
      cond.validate();
      Tensor latent = invert(sampler, src.record.image, cond, iv_a.steps);
      fs::path outp(iv_a.out);
      if (outp.has_parent_path()) fs::create_directories(outp.parent_path());
      save_ctsr(outp, latent);
      std::cout << outp.string() << '\n';
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
