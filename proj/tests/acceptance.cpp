// Acceptance gate: ten go/no-go properties, printed one line each.
//
// Usage: acceptance <run_dir> <cli_binary>
//   run_dir    directory produced by `composer acceptance-prepare`
//              (checkpoint under <run_dir>/ckpt, training log alongside)
//   cli_binary path to the composer CLI, exercised by the determinism check
//
// Criteria 1-5 are model-free and must always hold; criteria 6-9 interrogate
// the pinned training run; criterion 10 replays every CLI verb twice and
// compares outputs byte for byte. Exit status 0 iff all ten pass.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "composer/color.hpp"
#include "composer/compose.hpp"
#include "composer/gradcheck.hpp"
#include "composer/image.hpp"
#include "composer/pilot.hpp"
#include "composer/scenes.hpp"
#include "composer/serialize.hpp"
#include "composer/unet.hpp"

using namespace composer;
namespace fs = std::filesystem;

namespace {

struct Result {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Autodiff integrity: primitives vs central differences, then a 64-bit
//    shadow pass through the whole denoiser.

double primitive_sweep(int reps) {
  Rng rng(31);
  double worst = 0;
  auto record = [&](double e) { worst = std::max(worst, e); };

  for (int rep = 0; rep < reps; ++rep) {
    auto a = TensorD::randn({3, 5}, rng);
    auto b = TensorD::randn({3, 5}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(add(t, b), b)); }, a, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(sub(t, b), t)); }, a, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return mean(mul(t, b)); }, a, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul_scalar(t, 1.7)); }, a, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(silu(t)); }, a, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mean_last(mul(t, t))); }, a, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) {
          return sum(mul(reshape(t, {5, 3}), reshape(b, {5, 3})));
        },
        a, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) {
          return sum(mul(transpose_axes(t, 0, 1), reshape(b, {5, 3})));
        },
        a, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) {
          return sum(mul(slice(t, 1, 1, 3), slice(b, 1, 0, 3)));
        },
        a, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) {
          return sum(mul(concat<double>({t, b}, 0), concat<double>({b, t}, 0)));
        },
        a, 1e-4));
    auto m1 = TensorD::randn({3, 4}, rng);
    auto m2 = TensorD::randn({4, 2}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(matmul(t, m2), matmul(t, m2))); },
        m1, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(matmul(m1, t), matmul(m1, t))); },
        m2, 1e-4));
    auto row = TensorD::randn({1, 5}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) {
          return sum(mul(expand(t, 0, 4), expand(row, 0, 4)));
        },
        row.clone(), 1e-4));
    auto vec = TensorD::randn({5}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(add_rowvec(a, t), b)); }, vec, 1e-4));
    auto x4 = TensorD::randn({2, 4, 3, 3}, rng);
    auto sc = TensorD::randn({2, 4}, rng);
    auto sh = TensorD::randn({2, 4}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(film(x4, t, sh), x4)); }, sc, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(film(t, sc, sh)); }, x4, 1e-4));
    auto up = TensorD::randn({1, 2, 3, 3}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) {
          auto u = upsample_nearest2x(t);
          return sum(mul(u, u));
        },
        up, 1e-4));
    auto g = TensorD::randn({4}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) {
          return sum(mul(group_norm(x4, int64_t{2}, t, g), x4));
        },
        TensorD::randn({4}, rng), 1e-4));
    auto table = TensorD::randn({6, 3}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) {
          auto e = gather_rows(t, {1, 4, 1, 0});
          return sum(mul(e, e));
        },
        table, 1e-4));
    auto a3 = TensorD::randn({2, 3, 4}, rng);
    auto b3 = TensorD::randn({2, 4, 2}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(bmm(t, b3), bmm(t, b3))); }, a3, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(bmm(a3, t), bmm(a3, t))); }, b3, 1e-4));
    auto cl = TensorD::uniform({3, 3}, rng, -0.4, 0.4);
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(clamp(t, -1.0, 1.0), t)); }, cl, 1e-4));
    auto sm = TensorD::randn({3, 5}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) {
          return sum(mul(masked_softmax(t, AttnMask::none()), b));
        },
        sm, 1e-4));
    // conv2d, both arguments
    auto cx = TensorD::randn({1, 2, 6, 6}, rng);
    auto ck = TensorD::randn({2, 2, 3, 3}, rng);
    auto cb = TensorD::randn({2}, rng);
    auto cw = TensorD::randn({1, 2, 6, 6}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(conv2d(t, ck, cb, 1, 1), cw)); },
        cx, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(conv2d(cx, t, cb, 1, 1), cw)); },
        ck, 1e-4));
    // attention, all three arguments, with a key mask
    auto q = TensorD::randn({1, 1, 3, 4}, rng);
    auto k = TensorD::randn({1, 1, 4, 4}, rng);
    auto v = TensorD::randn({1, 1, 4, 4}, rng);
    std::vector<uint8_t> amask(12, 1);
    amask[2] = 0;
    auto aw = TensorD::randn({1, 1, 3, 4}, rng);
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(attention(t, k, v, amask), aw)); },
        q, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(attention(q, t, v, amask), aw)); },
        k, 1e-4));
    record(grad_check<double>(
        [&](const TensorD& t) { return sum(mul(attention(q, k, t, amask), aw)); },
        v, 1e-4));
  }
  return worst;
}

UNetConfig probe_config() {
  UNetConfig cfg;
  cfg.base_channels = 16;
  cfg.channel_mults = {1, 2};
  cfg.blocks_per_level = 1;
  cfg.attention_levels = {1};
  cfg.head_channels = 8;
  cfg.model_dim = 32;
  cfg.image_size = 16;
  cfg.local_channels = 8;
  cfg.norm_groups = 4;
  return cfg;
}

Bundle probe_bundle(Rng& rng, int64_t hw) {
  Bundle b;
  b.caption = std::vector<int>{2, 5, 9};
  auto sem = Tensor::randn({kSemanticDim}, rng);
  float n2 = 0;
  for (int64_t i = 0; i < sem.numel(); ++i) n2 += sem.ptr()[i] * sem.ptr()[i];
  for (int64_t i = 0; i < sem.numel(); ++i) sem.ptr()[i] /= std::sqrt(n2);
  b.semantic = sem;
  auto pal = Tensor::zeros({kPaletteBins});
  float psum = 0;
  for (int64_t i = 0; i < pal.numel(); ++i) {
    pal.ptr()[i] = float(rng.uniform());
    psum += pal.ptr()[i];
  }
  for (int64_t i = 0; i < pal.numel(); ++i) pal.ptr()[i] /= psum;
  b.palette = pal;
  b.sketch = Tensor::zeros({1, hw, hw});
  b.sketch->ptr()[3] = 1.0f;
  b.depth = Tensor::uniform({1, hw, hw}, rng, 0.0, 1.0);
  b.intensity = Tensor::uniform({1, hw, hw}, rng, -1.0, 1.0);
  return b;
}

double end_to_end_fd() {
  auto cfg = probe_config();
  auto pm32 = init_denoiser_params(cfg, 9);
  {
    Rng hr(80);  // open the zero-initialized head so every path carries signal
    auto& hw = pm32.at("unet.head.conv.w");
    for (int64_t i = 0; i < hw.numel(); ++i)
      hw.ptr()[i] = float(hr.normal()) * 0.05f;
  }
  auto pm = param_cast<double>(pm32);
  Rng rng(7);
  auto x64 = tensor_cast<double>(Tensor::randn({1, 3, 16, 16}, rng));
  auto n64 = tensor_cast<double>(Tensor::randn({1, 3, 16, 16}, rng));
  auto b64 = bundle_cast<double>(probe_bundle(rng, 16));

  auto eval = [&]() -> double {
    NoGradGuard ng;
    auto eps = denoise(pm, cfg, x64, 111, b64, DropoutMask::all());
    auto d = sub(eps, n64);
    return mean(mul(d, d)).item();
  };

  auto eps0 = denoise(pm, cfg, x64, 111, b64, DropoutMask::all());
  auto d0 = sub(eps0, n64);
  mean(mul(d0, d0)).backward();

  const std::vector<std::string> probes = {
      "unet.stem.w",            "unet.down.l0.b0.conv1.w",
      "unet.down.l0.b0.temb.w", "unet.down.l1.b0.attn.qkv.w",
      "unet.down.l1.b0.attn.kv.w", "unet.mid.b0.conv2.w",
      "unet.mid.attn.proj.w",   "unet.up.l1.b1.conv1.w",
      "unet.up.l0.b1.skip.w",   "unet.head.conv.w",
      "unet.time.l1.w",         "cond.word_table",
      "cond.word.proj.w",       "cond.semantic.proj.w",
      "cond.palette.tok.w",     "cond.local.sketch.c1.w",
      "cond.local.depth.c2.w",  "unet.down.l0.b0.norm1.g",
      "unet.up.l1.b0.temb.b",   "unet.head.norm.g",
  };
  double worst = 0;
  Rng pick(12345);
  for (const auto& name : probes) {
    auto& p = pm.at(name);
    if (!p.has_grad()) return 1.0;  // probe never touched: fail loudly
    int64_t idx = name == "cond.word_table"
                      ? 2 * kWordDim + 3
                      : int64_t(pick.uniform_int(0, int(p.numel() - 1)));
    worst = std::max(worst, grad_check_coords<double>(eval, p.ptr() + idx,
                                                      p.grad()[idx], 1e-4));
  }
  return worst;
}

Result criterion_autodiff() {
  auto t0 = std::chrono::steady_clock::now();
  double prim = primitive_sweep(100);
  double e2e = end_to_end_fd();
  double secs = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - t0).count();
  bool pass = prim < 1e-4 && e2e < 1e-3 && secs < 300.0;
  return {pass, fmt("primitives %.2e < 1e-4, end-to-end %.2e < 1e-3, %.0f s",
                    prim, e2e, secs)};
}

// ---------------------------------------------------------------------------
// 2. Guidance algebra on an additive mock denoiser.

Bundle mock_bundle(std::vector<Slot> slots) {
  Bundle b;
  for (Slot s : slots) {
    switch (s) {
      case Slot::kCaption: b.caption = std::vector<int>{1, 2}; break;
      case Slot::kSemantic: {
        auto t = Tensor::zeros({kSemanticDim});
        t.ptr()[0] = 1.f;
        b.semantic = t;
        break;
      }
      case Slot::kPalette: {
        auto t = Tensor::zeros({kPaletteBins});
        t.ptr()[0] = 1.f;
        b.palette = t;
        break;
      }
      case Slot::kSketch: b.sketch = Tensor::zeros({1, 4, 4}); break;
      case Slot::kInstances: b.instances = Tensor::zeros({3, 4, 4}); break;
      case Slot::kDepth: b.depth = Tensor::zeros({1, 4, 4}); break;
      case Slot::kIntensity: b.intensity = Tensor::zeros({1, 4, 4}); break;
      case Slot::kMasked: b.masked = Tensor::zeros({4, 4, 4}); break;
    }
  }
  return b;
}

Result criterion_guidance() {
  // Mock returning a constant whose value encodes the present slots as a
  // bitmask (weight 2^slot); per-condition guidance weights become exactly
  // readable from the output scalar.
  DenoiseFn<float> mock = [](const Tensor& x, int64_t, const Bundle& c) {
    float v = 0.f;
    for (Slot s : all_slots())
      if (c.has(s)) v += float(1 << int(s));
    return Tensor::full(x.shape(), v);
  };
  auto x = Tensor::zeros({3, 4, 4});
  double worst = 0;

  // Two-point reduction: omega = 1 returns the conditional prediction,
  // omega = 0 the prediction under c1 (unconditional when c1 is empty).
  auto cond = mock_bundle({Slot::kSketch});
  auto e_cond = mock(x, 10, cond);
  auto e_unc = mock(x, 10, Bundle::empty());
  worst = std::max<double>(
      worst, max_abs_diff(
                 set_guidance<float>(mock, {x, 10}, {Bundle::empty(), cond, 1.0}),
                 e_cond));
  worst = std::max<double>(
      worst, max_abs_diff(
                 set_guidance<float>(mock, {x, 10}, {Bundle::empty(), cond, 0.0}),
                 e_unc));

  // General cfg line: out - out(omega=0) == omega * (cond - uncond).
  for (double omega : {0.5, 3.0, 7.5}) {
    auto lhs = sub(set_guidance<float>(mock, {x, 10},
                                       {Bundle::empty(), cond, omega}),
                   set_guidance<float>(mock, {x, 10},
                                       {Bundle::empty(), cond, 0.0}));
    auto rhs = mul_scalar(sub(e_cond, e_unc), float(omega));
    worst = std::max<double>(worst, max_abs_diff(lhs, rhs));
  }

  // Per-condition effective weights {omega, 1-omega, 1}: semantic only in
  // c2, palette only in c1, sketch in both.
  double omega = 3.0;
  GuidanceSpec mixed{mock_bundle({Slot::kPalette, Slot::kSketch}),
                     mock_bundle({Slot::kSemantic, Slot::kSketch}), omega};
  auto got = set_guidance<float>(mock, {x, 10}, mixed);
  double expect = omega * 2.0 + (1.0 - omega) * 4.0 + 1.0 * 8.0;
  worst = std::max<double>(worst, std::abs(got.ptr()[0] - expect));

  // omega-invariance when the two condition sets coincide.
  auto both = mock_bundle({Slot::kSemantic, Slot::kPalette});
  Tensor ref;
  for (double w : {0.0, 1.0, 3.0, 7.5}) {
    auto out = set_guidance<float>(mock, {x, 10}, {both, both, w});
    if (!ref.defined())
      ref = out;
    else
      worst = std::max<double>(worst, max_abs_diff(out, ref));
  }

  return {worst <= 1e-6, fmt("worst deviation %.2e <= 1e-6", worst)};
}

// ---------------------------------------------------------------------------
// 3. Schedule and sampler identities.

Result criterion_schedule() {
  double worst_var = 0;
  for (auto kind : {ScheduleKind::kCosine, ScheduleKind::kLinear}) {
    auto s = make_schedule(kind, 1000);
    for (int64_t t = 0; t <= 1000; ++t) {
      double a = s.a_at(t), sg = s.sigma_at(t);
      worst_var = std::max(worst_var, std::abs(a * a + sg * sg - 1.0));
    }
  }

  Rng rng(59);
  auto s = make_schedule(ScheduleKind::kCosine, 1000);
  double worst_inv = 0;
  for (int rep = 0; rep < 100; ++rep) {
    int64_t t = rng.uniform_int(1, 999);
    auto x = Tensor::randn({2, 3, 3}, rng);
    auto eps = Tensor::randn({2, 3, 3}, rng);
    auto down = ddim_step<float>({x, t}, eps, s);
    auto back = ddim_invert_step<float>(down, eps, s);
    if (back.t != t) return {false, "inverse landed on the wrong timestep"};
    worst_inv = std::max<double>(worst_inv, max_abs_diff(back.x, x));
  }
  bool pass = worst_var <= 1e-6 && worst_inv < 1e-5;
  return {pass, fmt("|a^2+s^2-1| %.2e <= 1e-6, invert-step %.2e < 1e-5",
                    worst_var, worst_inv)};
}

// ---------------------------------------------------------------------------
// 4. Histogram vs a dense brute-force smoothing oracle.

std::vector<double> histogram_oracle(const Tensor& image) {
  int64_t hw = image.dim(1) * image.dim(2);
  const float* p = image.ptr();
  std::vector<double> counts(275, 0.0);
  for (int64_t i = 0; i < hw; ++i) {
    Lab lab = rgb_to_lab(p[i], p[hw + i], p[2 * hw + i]);
    BinCoord c = palette_bin(lab);
    counts[size_t((c.hue * 5 + c.sat) * 5 + c.light)] += 1.0;
  }
  double sig_h = kSmoothingSigma / (360.0 / 11.0);
  double sig_s = kSmoothingSigma / (kChromaNorm / 5.0);
  double sig_l = kSmoothingSigma / (100.0 / 5.0);
  std::vector<double> out(275, 0.0);
  for (int h = 0; h < 11; ++h)
    for (int s = 0; s < 5; ++s)
      for (int l = 0; l < 5; ++l) {
        double acc = 0.0;
        for (int hs = 0; hs < 11; ++hs)
          for (int ss = 0; ss < 5; ++ss)
            for (int ls = 0; ls < 5; ++ls) {
              int dh = std::abs(h - hs);
              dh = std::min(dh, 11 - dh);
              double w =
                  std::exp(-(dh * dh) / (2 * sig_h * sig_h)) *
                  std::exp(-((s - ss) * (s - ss)) / (2 * sig_s * sig_s)) *
                  std::exp(-((l - ls) * (l - ls)) / (2 * sig_l * sig_l));
              acc += w * counts[size_t((hs * 5 + ss) * 5 + ls)];
            }
        out[size_t((h * 5 + s) * 5 + l)] = acc;
      }
  double total = 0;
  for (double v : out) total += v;
  for (double& v : out) v /= total;
  return out;
}

Result criterion_histogram() {
  Rng rng(73);
  double worst_bin = 0, worst_sum = 0;
  for (int rep = 0; rep < 50; ++rep) {
    auto img = Tensor::uniform({3, 16, 16}, rng, 0.f, 1.f);
    auto hist = color_histogram(img);
    auto oracle = histogram_oracle(img);
    double sum = 0;
    for (int64_t i = 0; i < 275; ++i) {
      worst_bin = std::max(
          worst_bin, std::abs(double(hist.ptr()[i]) - oracle[size_t(i)]));
      sum += hist.ptr()[i];
    }
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
  }
  bool pass = worst_bin <= 1e-6 && worst_sum <= 1e-5;
  return {pass, fmt("worst bin %.2e <= 1e-6, worst |sum-1| %.2e <= 1e-5",
                    worst_bin, worst_sum)};
}

// ---------------------------------------------------------------------------
// 5. Dropout strategy frequencies.

Result criterion_dropout() {
  const int n = 100000;
  Rng rng(20260815);
  int none_n = 0, all_n = 0;
  std::array<int, kNumSlots> kept{};
  for (int i = 0; i < n; ++i) {
    auto m = sample_dropout(rng);
    bool any = false, every = true;
    for (Slot s : all_slots()) {
      bool k = m.kept(s);
      any |= k;
      every &= k;
      if (k) ++kept[size_t(s)];
    }
    if (!any) ++none_n;
    if (every) ++all_n;
  }
  double fr_none = double(none_n) / n, fr_all = double(all_n) / n;
  double worst = std::max(std::abs(fr_none - 0.10), std::abs(fr_all - 0.10));
  for (Slot s : all_slots()) {
    double want = s == Slot::kIntensity ? 0.34 : 0.50;
    worst = std::max(worst, std::abs(double(kept[size_t(s)]) / n - want));
  }
  return {worst <= 0.01,
          fmt("none %.3f, all %.3f, worst marginal dev %.3f <= 0.01",
              fr_none, fr_all, worst)};
}

// ---------------------------------------------------------------------------
// Trained-model helpers.

Tensor zero_mask() { return Tensor::zeros({1, kImageSize, kImageSize}); }

// Every slot of a record, ground truth included. The editable-region mask is
// all zero: nothing is editable, so the masked view shows the whole image.
Bundle full_bundle(const DatasetRecord& rec) {
  SlotRequest req;
  req.source = record_source(rec);
  req.slots = {Slot::kCaption,   Slot::kSemantic, Slot::kPalette,
               Slot::kSketch,    Slot::kInstances, Slot::kDepth,
               Slot::kIntensity, Slot::kMasked};
  req.mask = zero_mask();
  return assemble_bundle({req});
}

double unit_mse(const Tensor& a, const Tensor& b) {
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = double(a.ptr()[i]) - b.ptr()[i];
    acc += d * d;
  }
  return acc / double(a.numel());
}

struct TrainedRun {
  bool ok = false;
  std::string why;
  std::optional<Sampler> sampler;
  PilotProfile profile;

  const Sampler& s() const { return *sampler; }
};

TrainedRun load_run(const fs::path& run_dir) {
  TrainedRun r;
  r.profile = pilot_profile();
  fs::path ckpt = run_dir / "ckpt";
  if (!fs::exists(ckpt / "manifest.txt")) {
    r.why = "no checkpoint at " + ckpt.string() + " (run acceptance-prepare)";
    return r;
  }
  auto ck = load_checkpoint(ckpt);
  if (ck.step < r.profile.train.steps) {
    r.why = fmt("checkpoint at step %lld of %lld; training incomplete",
                (long long)ck.step, (long long)r.profile.train.steps);
    return r;
  }
  r.sampler.emplace(make_sampler(ck, /*use_ema=*/true));
  r.ok = true;
  return r;
}

// ---------------------------------------------------------------------------
// 6. Trained round trip: invert then resample under the same full bundle.

Result criterion_round_trip(const TrainedRun& run) {
  if (!run.ok) return {false, run.why};
  const int n = 25;
  double mean_psnr = 0, worst = 1e9;
  for (int i = 0; i < n; ++i) {
    auto rec = pilot_holdout(run.profile, uint64_t(i));
    auto bundle = full_bundle(rec);
    auto latent = invert(run.s(), rec.image, bundle, 50);
    auto out = sample_from_latent(run.s(), latent, bundle, 50);
    double db = psnr(out, rec.image);
    mean_psnr += db;
    worst = std::min(worst, db);
  }
  mean_psnr /= n;
  return {mean_psnr >= 28.0,
          fmt("mean %.1f dB >= 28.0 over %d scenes (worst %.1f dB)",
              mean_psnr, n, worst)};
}

// ---------------------------------------------------------------------------
// 7. Compositional fidelity: more conditions, lower reconstruction error.

Result criterion_monotonicity(const TrainedRun& run) {
  if (!run.ok) return {false, run.why};
  const int n = 50;
  const int64_t steps = 30;
  double m_all = 0, m_sp = 0, m_s = 0, m_e = 0;
  for (int i = 0; i < n; ++i) {
    auto rec = pilot_holdout(run.profile, uint64_t(100 + i));
    auto all8 = full_bundle(rec);
    uint64_t seed = 777000 + uint64_t(i);  // shared: same x_T per scene
    auto g = [&](const Bundle& b) {
      return unit_mse(generate(run.s(), b, 3.0, steps, seed), rec.image);
    };
    m_all += g(all8);
    m_sp += g(all8.restricted_to({Slot::kSemantic, Slot::kPalette}));
    m_s += g(all8.restricted_to({Slot::kSemantic}));
    m_e += g(Bundle::empty());
  }
  m_all /= n;
  m_sp /= n;
  m_s /= n;
  m_e /= n;
  bool pass = 1.10 * m_all <= m_sp && 1.10 * m_sp <= m_s && 1.10 * m_s <= m_e;
  return {pass,
          fmt("MSE all8 %.4f < sem+pal %.4f < sem %.4f < none %.4f "
              "(10%% margins %s)",
              m_all, m_sp, m_s, m_e, pass ? "hold" : "violated")};
}

// ---------------------------------------------------------------------------
// 8. Region edits leave outside-mask pixels bitwise untouched.

Result criterion_region(const TrainedRun& run) {
  if (!run.ok) return {false, run.why};
  Rng rng(880001);
  const std::vector<Slot> pool = {Slot::kCaption, Slot::kSemantic,
                                  Slot::kPalette, Slot::kSketch,
                                  Slot::kInstances, Slot::kDepth,
                                  Slot::kIntensity};
  int64_t mismatched = 0;
  for (int i = 0; i < 100; ++i) {
    auto rec = pilot_holdout(run.profile, uint64_t(200 + i));
    auto mask = random_rect_mask(kImageSize, kImageSize, rng);
    std::vector<Slot> subset;
    for (Slot s : pool)
      if (rng.uniform() < 0.5) subset.push_back(s);
    auto bundle = full_bundle(rec).restricted_to(subset);
    auto out = region_edit(run.s(), rec.image, mask, bundle, 3.0, 6,
                           888000 + uint64_t(i));
    int64_t hw = kImageSize * kImageSize;
    for (int64_t p = 0; p < hw; ++p) {
      if (mask.ptr()[p] != 0.f) continue;
      for (int64_t c = 0; c < 3; ++c)
        if (std::memcmp(out.ptr() + c * hw + p, rec.image.ptr() + c * hw + p,
                        sizeof(float)) != 0)
          ++mismatched;
    }
  }
  return {mismatched == 0,
          fmt("%lld outside-mask float mismatches over 100 edits (want 0)",
              (long long)mismatched)};
}

// ---------------------------------------------------------------------------
// 9. Palette swaps move hue toward the target while preserving layout.

double circ_dist_deg(double a, double b) {
  double d = std::fmod(std::fabs(a - b), 360.0);
  return d > 180.0 ? 360.0 - d : d;
}

// Chroma-weighted circular mean hue (degrees) over the given pixel indices.
double mean_hue_deg(const Tensor& img, const std::vector<int64_t>& pts) {
  int64_t hw = img.dim(1) * img.dim(2);
  double sx = 0, sy = 0;
  for (int64_t p : pts) {
    Lab lab = rgb_to_lab(img.ptr()[p], img.ptr()[hw + p], img.ptr()[2 * hw + p]);
    double ang = std::atan2(lab.b, lab.a);
    double chroma = std::hypot(lab.a, lab.b);
    sx += chroma * std::cos(ang);
    sy += chroma * std::sin(ang);
  }
  double ang = std::atan2(sy, sx) * 180.0 / M_PI;
  return ang < 0 ? ang + 360.0 : ang;
}

// Shape/background layout agreement. Each output row's background color is
// fitted as the median output color over pixels the source labels
// background; a pixel reads "shape" when it sits far from that fit. Rows
// fully covered by shapes fall back to the global fit.
double layout_agreement(const Tensor& out, const DatasetRecord& rec) {
  int64_t h = out.dim(1), w = out.dim(2), hw = h * w;
  const float* bg = rec.instances.ptr();  // channel 0 = background one-hot
  auto median = [](std::vector<float>& v) {
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    return v[v.size() / 2];
  };
  std::array<float, 3> global{};
  {
    std::array<std::vector<float>, 3> acc;
    for (int64_t p = 0; p < hw; ++p)
      if (bg[p] == 1.f)
        for (int64_t c = 0; c < 3; ++c) acc[size_t(c)].push_back(out.ptr()[c * hw + p]);
    for (int64_t c = 0; c < 3; ++c)
      global[size_t(c)] = acc[size_t(c)].empty() ? 0.5f : median(acc[size_t(c)]);
  }
  int64_t agree = 0;
  for (int64_t y = 0; y < h; ++y) {
    std::array<std::vector<float>, 3> acc;
    for (int64_t x = 0; x < w; ++x) {
      int64_t p = y * w + x;
      if (bg[p] == 1.f)
        for (int64_t c = 0; c < 3; ++c) acc[size_t(c)].push_back(out.ptr()[c * hw + p]);
    }
    std::array<float, 3> fit = global;
    if (acc[0].size() >= 4)
      for (int64_t c = 0; c < 3; ++c) fit[size_t(c)] = median(acc[size_t(c)]);
    for (int64_t x = 0; x < w; ++x) {
      int64_t p = y * w + x;
      double d2 = 0;
      for (int64_t c = 0; c < 3; ++c) {
        double d = double(out.ptr()[c * hw + p]) - fit[size_t(c)];
        d2 += d * d;
      }
      bool pred_shape = std::sqrt(d2) > 0.15;
      bool true_shape = bg[p] == 0.f;
      if (pred_shape == true_shape) ++agree;
    }
  }
  return double(agree) / double(hw);
}

Result criterion_recolor(const TrainedRun& run) {
  if (!run.ok) return {false, run.why};
  const int n = 20;

  // Saturated candidate targets; each trial picks the one hue-farthest from
  // the scene so "toward the target" always has room to show.
  const std::vector<int> candidates = {0, 1, 2, 3, 5, 6};  // of kColorSet
  struct Target {
    Tensor palette;
    double hue_center;
  };
  std::vector<Target> targets;
  for (int ci : candidates) {
    const auto& c = kColorSet[size_t(ci)];
    auto solid = Tensor::zeros({3, 8, 8});
    for (int64_t p = 0; p < 64; ++p) {
      solid.ptr()[p] = c.r;
      solid.ptr()[64 + p] = c.g;
      solid.ptr()[128 + p] = c.b;
    }
    auto pal = color_histogram(solid);
    int64_t arg = 0;
    for (int64_t i = 1; i < pal.numel(); ++i)
      if (pal.ptr()[i] > pal.ptr()[arg]) arg = i;
    double center = (double(arg / 25) + 0.5) * (360.0 / 11.0);
    targets.push_back({pal, center});
  }

  int toward = 0;
  double mean_agree = 0;
  for (int i = 0; i < n; ++i) {
    auto rec = pilot_holdout(run.profile, uint64_t(400 + i));
    std::vector<int64_t> shape_pts;
    int64_t hw = kImageSize * kImageSize;
    for (int64_t p = 0; p < hw; ++p)
      if (rec.instances.ptr()[p] == 0.f) shape_pts.push_back(p);
    double src_hue = mean_hue_deg(rec.image, shape_pts);
    size_t pick = 0;
    for (size_t t = 1; t < targets.size(); ++t)
      if (circ_dist_deg(src_hue, targets[t].hue_center) >
          circ_dist_deg(src_hue, targets[pick].hue_center))
        pick = t;

    // Image-derived decomposition, exactly what the CLI recolor path uses.
    Source src = image_source(rec.image.clone());
    Bundle deco;
    for (Slot s : extractable_slots(src))
      extract_slot(deco, src, s, std::nullopt);
    deco.validate();
    auto out = colorize(run.s(), rec.image, deco, targets[pick].palette, 50);

    double out_hue = mean_hue_deg(out, shape_pts);
    if (circ_dist_deg(out_hue, targets[pick].hue_center) <
        circ_dist_deg(src_hue, targets[pick].hue_center))
      ++toward;
    mean_agree += layout_agreement(out, rec);
  }
  mean_agree /= n;
  bool pass = toward >= 16 && mean_agree >= 0.90;
  return {pass, fmt("hue toward target %d/%d (need 16), layout agreement "
                    "%.3f >= 0.90",
                    toward, n, mean_agree)};
}

// ---------------------------------------------------------------------------
// 10. CLI determinism: every verb, two runs, byte-identical outputs.

int run_cmd(const std::string& cmd) { return std::system(cmd.c_str()); }

std::string hash_tree(const fs::path& dir) {
  std::vector<std::string> lines;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file())
      lines.push_back(fs::relative(e.path(), dir).generic_string() + " " +
                      sha256_file(e.path()));
  std::sort(lines.begin(), lines.end());
  std::string all;
  for (const auto& l : lines) {
    all += l;
    all += '\n';
  }
  return all;
}

Result criterion_determinism(const fs::path& run_dir, const std::string& cli) {
  fs::path root = run_dir / "c10";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string log = " >> " + (root / "cli.log").string() + " 2>&1";
  auto q = [](const fs::path& p) { return "\"" + p.string() + "\""; };
  const std::string bin = "\"" + cli + "\"";

  auto sh = [&](const std::string& args) {
    return run_cmd(bin + " " + args + log);
  };

  std::vector<std::string> bad;

  // Dataset generation and decomposition.
  if (sh("gen-data --n 2 --seed 41 --out " + q(root / "ga")) != 0 ||
      sh("gen-data --n 2 --seed 41 --out " + q(root / "gb")) != 0)
    return {false, "gen-data invocation failed (see c10/cli.log)"};
  if (hash_tree(root / "ga") != hash_tree(root / "gb"))
    bad.push_back("gen-data");

  fs::path img = root / "ga" / "000000.ppm";
  fs::path img2 = root / "ga" / "000001.ppm";
  if (sh("decompose --image " + q(img) + " --out " + q(root / "da")) != 0 ||
      sh("decompose --image " + q(img) + " --out " + q(root / "db")) != 0)
    return {false, "decompose invocation failed (see c10/cli.log)"};
  if (hash_tree(root / "da") != hash_tree(root / "db"))
    bad.push_back("decompose");

  // A tiny but complete training run, twice.
  {
    std::ofstream cfg(root / "tiny.cfg");
    cfg << "unet.base_channels=8\nunet.channel_mults=1,2\n"
           "unet.blocks_per_level=1\nunet.attention_levels=1\n"
           "unet.head_channels=8\nunet.model_dim=32\nunet.image_size=64\n"
           "unet.local_channels=8\nunet.norm_groups=4\n"
           "train.steps=6\ntrain.batch_size=2\ntrain.lr=0.00012\n"
           "train.adam_beta1=0.9\ntrain.adam_beta2=0.999\n"
           "train.adam_eps=1e-8\ntrain.ema_decay=0.99\n"
           "train.weight_dropout=0.1\ntrain.grad_clip=1\n"
           "train.diffusion_steps=100\ntrain.schedule=cosine\n"
           "train.seed=7\ntrain.checkpoint_every=6\n";
  }
  std::string tcfg = " --config " + q(root / "tiny.cfg");
  if (sh("train --data " + q(root / "ga") + tcfg + " --out " + q(root / "ta")) != 0 ||
      sh("train --data " + q(root / "ga") + tcfg + " --out " + q(root / "tb")) != 0)
    return {false, "train invocation failed (see c10/cli.log)"};
  if (hash_tree(root / "ta") != hash_tree(root / "tb")) bad.push_back("train");

  // A binary editable-region mask for region-edit.
  {
    auto m = Tensor::zeros({3, kImageSize, kImageSize});
    int64_t hw = kImageSize * kImageSize;
    for (int64_t y = 16; y < 40; ++y)
      for (int64_t x = 12; x < 44; ++x)
        for (int64_t c = 0; c < 3; ++c)
          m.ptr()[c * hw + y * kImageSize + x] = 1.f;
    save_ppm(root / "mask.ppm", m);
  }

  // Each sampling verb twice against the tiny checkpoint.
  std::string ck = " --ckpt " + q(root / "ta");
  auto twice = [&](const std::string& name, const std::string& args,
                   const std::string& ext) {
    fs::path o1 = root / (name + "1" + ext), o2 = root / (name + "2" + ext);
    if (sh(name + ck + " " + args + " --out " + q(o1)) != 0 ||
        sh(name + ck + " " + args + " --out " + q(o2)) != 0) {
      bad.push_back(name + " (failed)");
      return;
    }
    if (sha256_file(o1) != sha256_file(o2)) bad.push_back(name);
  };
  twice("sample",
        "--cond semantic=" + q(img) + " --cond palette=" + q(img2) +
            " --steps 3 --omega 3 --seed 11",
        ".ppm");
  twice("variations",
        "--image " + q(img) + " --subset semantic,palette --steps 3 --seed 12",
        ".ppm");
  twice("interpolate",
        "--image-a " + q(img) + " --image-b " + q(img2) +
            " --lambda 0.4 --steps 3 --seed 13",
        ".ppm");
  twice("reconfigure", "--image " + q(img) + " --cond palette=" + q(img2) +
                           " --steps 3",
        ".ppm");
  twice("region-edit",
        "--image " + q(img) + " --mask " + q(root / "mask.ppm") +
            " --cond semantic=" + q(img) + " --steps 3 --seed 14",
        ".ppm");
  twice("colorize",
        "--image " + q(img) + " --palette " + q(img2) +
            " --method direct --steps 3 --seed 15",
        ".ppm");
  twice("invert", "--image " + q(img) + " --subset semantic --steps 3",
        ".ctsr");

  // acceptance-prepare on the finished run: re-running must change nothing.
  fs::path manifest = run_dir / "ckpt" / "manifest.txt";
  if (!fs::exists(manifest)) {
    bad.push_back("acceptance-prepare (no finished run)");
  } else {
    auto before = sha256_file(manifest);
    if (sh("acceptance-prepare --out " + q(run_dir)) != 0)
      bad.push_back("acceptance-prepare (failed)");
    else if (sha256_file(manifest) != before)
      bad.push_back("acceptance-prepare");
  }

  if (bad.empty()) return {true, "11 verbs byte-identical across reruns"};
  std::string detail = "nondeterministic or failing:";
  for (const auto& b : bad) detail += " " + b;
  return {false, detail};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: acceptance <run_dir> <cli_binary>\n");
    return 2;
  }
  fs::path run_dir = argv[1];
  std::string cli = argv[2];

  TrainedRun run = load_run(run_dir);

  struct Item {
    const char* name;
    std::function<Result()> fn;
  };
  const std::vector<Item> items = {
      {"autodiff vs finite differences", [] { return criterion_autodiff(); }},
      {"guidance algebra on mocks", [] { return criterion_guidance(); }},
      {"schedule and inversion identities", [] { return criterion_schedule(); }},
      {"histogram vs dense oracle", [] { return criterion_histogram(); }},
      {"dropout mode and marginal rates", [] { return criterion_dropout(); }},
      {"trained invert/resample round trip",
       [&] { return criterion_round_trip(run); }},
      {"reconstruction improves with conditions",
       [&] { return criterion_monotonicity(run); }},
      {"region edits exact outside mask", [&] { return criterion_region(run); }},
      {"palette swap moves hue, keeps layout",
       [&] { return criterion_recolor(run); }},
      {"CLI verbs bitwise deterministic",
       [&] { return criterion_determinism(run_dir, cli); }},
  };

  int passed = 0;
  for (size_t i = 0; i < items.size(); ++i) {
    Result r;
    try {
      r = items[i].fn();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    if (r.pass) ++passed;
    std::string dots(42 - std::min<size_t>(40, std::strlen(items[i].name)), '.');
    std::printf("[%2zu] %s %s %s  (%s)\n", i + 1, items[i].name, dots.c_str(),
                r.pass ? "PASS" : "FAIL", r.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %d/10 criteria passed\n", passed);
  return passed == 10 ? 0 : 1;
}
