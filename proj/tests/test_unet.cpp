#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <vector>

#include "composer/gradcheck.hpp"
#include "composer/rng.hpp"
#include "composer/unet.hpp"

using namespace composer;

namespace {

UNetConfig tiny_config() {
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

Bundle demo_bundle(Rng& rng, int64_t hw) {
  Bundle b;
  b.caption = std::vector<int>{2, 5, 9};
  auto sem = Tensor::randn({kSemanticDim}, rng);
  float n2 = 0;
  for (int64_t i = 0; i < sem.numel(); ++i) n2 += sem.ptr()[i] * sem.ptr()[i];
  for (int64_t i = 0; i < sem.numel(); ++i)
    sem.ptr()[i] /= std::sqrt(n2);
  b.semantic = sem;
  auto pal = Tensor::zeros({kPaletteBins});
  float sum = 0;
  for (int64_t i = 0; i < pal.numel(); ++i) {
    pal.ptr()[i] = float(rng.uniform());
    sum += pal.ptr()[i];
  }
  for (int64_t i = 0; i < pal.numel(); ++i) pal.ptr()[i] /= sum;
  b.palette = pal;
  b.sketch = Tensor::zeros({1, hw, hw});
  b.sketch->ptr()[3] = 1.0f;
  b.depth = Tensor::uniform({1, hw, hw}, rng, 0.0, 1.0);
  b.intensity = Tensor::uniform({1, hw, hw}, rng, -1.0, 1.0);
  return b;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.ptr(), b.ptr(),
                     sizeof(float) * size_t(a.numel())) == 0;
}

}  // namespace

TEST_CASE("timestep embedding basics") {
  auto e0 = timestep_embedding<float>(0, 32);
  for (int64_t i = 0; i < 16; ++i) {
    CHECK(e0.ptr()[2 * i] == 0.0f);       // sin(0)
    CHECK(e0.ptr()[2 * i + 1] == 1.0f);   // cos(0)
  }
  // Every sin/cos pair lies on the unit circle, so the norm is exact.
  for (int64_t t : {1, 17, 500, 999}) {
    auto e = timestep_embedding<float>(t, 64);
    double n2 = 0;
    for (int64_t i = 0; i < 64; ++i) n2 += double(e.ptr()[i]) * e.ptr()[i];
    CHECK(std::sqrt(n2) == doctest::Approx(std::sqrt(32.0)).epsilon(1e-5));
  }
  CHECK_THROWS_AS(timestep_embedding<float>(5, 33), ContractError);
  CHECK_THROWS_AS(timestep_embedding<float>(5, 0), ContractError);
}

TEST_CASE("timestep embeddings separate all steps of the schedule") {
  // Fingerprint each step by its embedding; 1000 steps must stay distinct
  // with a healthy margin in L-inf distance between consecutive steps.
  const int64_t dim = 64;
  double min_gap = 1e9;
  auto prev = timestep_embedding<float>(0, dim);
  std::set<std::vector<float>> seen;
  seen.insert(std::vector<float>(prev.ptr(), prev.ptr() + dim));
  for (int64_t t = 1; t < 1000; ++t) {
    auto e = timestep_embedding<float>(t, dim);
    double gap = 0;
    for (int64_t i = 0; i < dim; ++i)
      gap = std::max(gap, std::abs(double(e.ptr()[i]) - prev.ptr()[i]));
    min_gap = std::min(min_gap, gap);
    seen.insert(std::vector<float>(e.ptr(), e.ptr() + dim));
    prev = e;
  }
  CHECK(seen.size() == 1000);
  CHECK(min_gap > 1e-4);
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(UNetConfig{}.validate());
  auto bad = tiny_config();
  bad.image_size = 15;  // not divisible by 2^(levels-1)
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = tiny_config();
  bad.head_channels = 5;  // does not divide attention channels
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = tiny_config();
  bad.attention_levels = {7};
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = tiny_config();
  bad.blocks_per_level = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = tiny_config();
  bad.norm_groups = 5;  // 16 % 5 != 0
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("initial prediction is exactly zero") {
  // The output head starts at zero, so the untrained denoiser predicts zero
  // noise regardless of inputs; training then starts from loss ~= 1.
  auto cfg = tiny_config();
  auto pm = init_denoiser_params(cfg, 3);
  Rng rng(1);
  auto x = Tensor::randn({2, 3, 16, 16}, rng);
  auto b = demo_bundle(rng, 16);
  NoGradGuard ng;
  auto eps = denoise(pm, cfg, x, 250, b, DropoutMask::all());
  REQUIRE(eps.shape() == x.shape());
  for (int64_t i = 0; i < eps.numel(); ++i) CHECK(eps.ptr()[i] == 0.0f);
}

TEST_CASE("denoiser shape checks and empty bundles") {
  auto cfg = tiny_config();
  auto pm = init_denoiser_params(cfg, 4);
  Rng rng(2);
  NoGradGuard ng;
  auto x = Tensor::randn({1, 3, 16, 16}, rng);
  CHECK(all_finite(denoise(pm, cfg, x, 0, Bundle::empty(), DropoutMask::all())));
  CHECK(all_finite(denoise(pm, cfg, x, 999, Bundle::empty(),
                           DropoutMask::none())));
  auto wrong_hw = Tensor::randn({1, 3, 8, 8}, rng);
  CHECK_THROWS_AS(
      denoise(pm, cfg, wrong_hw, 0, Bundle::empty(), DropoutMask::all()),
      ShapeError);
  auto wrong_c = Tensor::randn({1, 4, 16, 16}, rng);
  CHECK_THROWS_AS(
      denoise(pm, cfg, wrong_c, 0, Bundle::empty(), DropoutMask::all()),
      ShapeError);
}

TEST_CASE("batch rows are processed independently") {
  auto cfg = tiny_config();
  auto pm = init_denoiser_params(cfg, 5);
  // Give the head nonzero weights so outputs are informative.
  {
    Rng hr(77);
    auto& hw = pm.at("unet.head.conv.w");
    for (int64_t i = 0; i < hw.numel(); ++i)
      hw.ptr()[i] = float(hr.normal()) * 0.05f;
  }
  Rng rng(3);
  auto b = demo_bundle(rng, 16);
  auto x = Tensor::randn({3, 3, 16, 16}, rng);
  NoGradGuard ng;
  auto eps = denoise(pm, cfg, x, 123, b, DropoutMask::all());

  // Row-by-row evaluation gives bitwise identical answers: group norm,
  // attention, and convolution all operate per sample.
  int64_t rn = 3 * 16 * 16;
  for (int64_t r = 0; r < 3; ++r) {
    auto xr = Tensor::zeros({1, 3, 16, 16});
    std::copy_n(x.ptr() + r * rn, rn, xr.ptr());
    auto er = denoise(pm, cfg, xr, 123, b, DropoutMask::all());
    CHECK(std::memcmp(er.ptr(), eps.ptr() + r * rn, sizeof(float) * rn) == 0);
  }
}

TEST_CASE("fully dropped conditioning ignores the bundle") {
  auto cfg = tiny_config();
  auto pm = init_denoiser_params(cfg, 6);
  {
    Rng hr(78);
    auto& hw = pm.at("unet.head.conv.w");
    for (int64_t i = 0; i < hw.numel(); ++i)
      hw.ptr()[i] = float(hr.normal()) * 0.05f;
  }
  Rng rng(4);
  auto x = Tensor::randn({1, 3, 16, 16}, rng);
  auto full = demo_bundle(rng, 16);
  NoGradGuard ng;
  auto e_full = denoise(pm, cfg, x, 42, full, DropoutMask::none());
  auto e_none = denoise(pm, cfg, x, 42, Bundle::empty(), DropoutMask::none());
  auto e_abs = denoise(pm, cfg, x, 42, Bundle::empty(), DropoutMask::all());
  CHECK(bitwise_equal(e_full, e_none));
  CHECK(bitwise_equal(e_full, e_abs));
}

TEST_CASE("training-mode dropout is reproducible and changes the output") {
  auto cfg = tiny_config();
  auto pm = init_denoiser_params(cfg, 7);
  {
    Rng hr(79);
    auto& hw = pm.at("unet.head.conv.w");
    for (int64_t i = 0; i < hw.numel(); ++i)
      hw.ptr()[i] = float(hr.normal()) * 0.05f;
  }
  Rng rng(5);
  auto x = Tensor::randn({1, 3, 16, 16}, rng);
  auto b = demo_bundle(rng, 16);
  NoGradGuard ng;
  auto clean = denoise(pm, cfg, x, 77, b, DropoutMask::all());
  Rng d1(900), d2(900), d3(901);
  ForwardCtx c1{&d1, 0.3}, c2{&d2, 0.3}, c3{&d3, 0.3};
  auto y1 = denoise(pm, cfg, x, 77, b, DropoutMask::all(), c1);
  auto y2 = denoise(pm, cfg, x, 77, b, DropoutMask::all(), c2);
  auto y3 = denoise(pm, cfg, x, 77, b, DropoutMask::all(), c3);
  CHECK(bitwise_equal(y1, y2));
  CHECK_FALSE(bitwise_equal(y1, y3));
  CHECK_FALSE(bitwise_equal(y1, clean));
}

TEST_CASE("every parameter participates after the head opens up") {
  auto cfg = tiny_config();
  auto pm = init_denoiser_params(cfg, 8);
  Rng rng(6);
  auto x = Tensor::randn({1, 3, 16, 16}, rng);
  auto noise = Tensor::randn({1, 3, 16, 16}, rng);
  auto b = demo_bundle(rng, 16);
  // Exercise every embedding row and every input channel so that "unused"
  // can only mean architecturally dead, not merely untouched by this sample.
  std::vector<int> every_token(kVocabSize);
  for (int i = 0; i < kVocabSize; ++i) every_token[size_t(i)] = i;
  b.caption = every_token;
  b.sketch = Tensor::zeros({1, 16, 16});
  for (int64_t i = 0; i < 256; ++i)
    b.sketch->ptr()[i] = rng.uniform() < 0.3 ? 1.0f : 0.0f;
  b.instances = Tensor::zeros({4, 16, 16});
  for (int64_t i = 0; i < 256; ++i) {
    int64_t ch = rng.uniform_int(0, 3);
    b.instances->ptr()[ch * 256 + i] = 1.0f;
  }
  b.masked = Tensor::uniform({4, 16, 16}, rng, 0.0, 1.0);

  auto step = [&]() {
    auto eps = denoise(pm, cfg, x, 321, b, DropoutMask::all());
    auto d = sub(eps, noise);
    auto loss = mean(mul(d, d));
    loss.backward();
  };

  // Step one: only the zero-initialised head can move (its input is the only
  // nonzero signal path into the loss).
  step();
  for (const auto& name : pm.names()) {
    auto& p = pm.at(name);
    if (!p.has_grad()) continue;
    for (int64_t i = 0; i < p.numel(); ++i)
      p.ptr()[i] -= 0.05f * p.grad()[i];
  }
  pm.zero_grads();

  // Step two: gradient reaches (nearly) everything. Learned nulls are the
  // only justified exceptions when the full bundle is present.
  step();
  int64_t covered = 0, total = 0, dead_tensors = 0;
  for (const auto& name : pm.names()) {
    auto& p = pm.at(name);
    total += p.numel();
    if (!p.has_grad()) {
      dead_tensors += 1;
      continue;
    }
    for (int64_t i = 0; i < p.numel(); ++i)
      covered += p.grad()[i] != 0.0f ? 1 : 0;
  }
  INFO("coverage ", covered, "/", total, " dead tensors ", dead_tensors);
  CHECK(double(covered) / double(total) > 0.99);
  pm.zero_grads();
}

TEST_CASE("analytic gradients match finite differences in shadow mode") {
  // 64-bit clone of the whole denoiser; probe a spread of parameters with
  // central differences on the scalar loss.
  auto cfg = tiny_config();
  auto pm32 = init_denoiser_params(cfg, 9);
  {
    Rng hr(80);
    auto& hw = pm32.at("unet.head.conv.w");
    for (int64_t i = 0; i < hw.numel(); ++i)
      hw.ptr()[i] = float(hr.normal()) * 0.05f;
  }
  auto pm = param_cast<double>(pm32);
  Rng rng(7);
  auto x64 = tensor_cast<double>(Tensor::randn({1, 3, 16, 16}, rng));
  auto n64 = tensor_cast<double>(Tensor::randn({1, 3, 16, 16}, rng));
  auto b64 = bundle_cast<double>(demo_bundle(rng, 16));

  auto eval = [&]() -> double {
    NoGradGuard ng;
    auto eps = denoise(pm, cfg, x64, 111, b64, DropoutMask::all());
    auto d = sub(eps, n64);
    return mean(mul(d, d)).item();
  };

  auto eps0 = denoise(pm, cfg, x64, 111, b64, DropoutMask::all());
  auto d0 = sub(eps0, n64);
  auto loss = mean(mul(d0, d0));
  loss.backward();

  const std::vector<std::string> probes = {
      "unet.stem.w",          "unet.down.l0.b0.conv1.w",
      "unet.down.l0.b0.temb.w", "unet.down.l1.b0.attn.qkv.w",
      "unet.down.l1.b0.attn.kv.w", "unet.mid.b0.conv2.w",
      "unet.mid.attn.proj.w", "unet.up.l1.b1.conv1.w",
      "unet.up.l0.b1.skip.w", "unet.head.conv.w",
      "unet.time.l1.w",       "cond.word_table",
      "cond.word.proj.w",     "cond.semantic.proj.w",
      "cond.palette.tok.w",   "cond.local.sketch.c1.w",
      "cond.local.depth.c2.w", "unet.down.l0.b0.norm1.g",
      "unet.up.l1.b0.temb.b", "unet.head.norm.g",
  };
  REQUIRE(probes.size() == 20);
  Rng pick(12345);
  for (const auto& name : probes) {
    auto& p = pm.at(name);
    REQUIRE(p.has_grad());
    int64_t idx = name == "cond.word_table"
                      ? 2 * kWordDim + 3  // a row that the caption uses
                      : int64_t(pick.uniform_int(0, int(p.numel() - 1)));
    double rel = grad_check_coords<double>(eval, p.ptr() + idx,
                                           p.grad()[idx], 1e-4);
    INFO("param ", name, " coord ", idx);
    CHECK(rel < 1e-3);
  }
  pm.zero_grads();
}

TEST_CASE("parameter counting") {
  auto cfg = tiny_config();
  CHECK(param_count(cfg) == param_count(cfg));
  CHECK(param_count(cfg) ==
        init_denoiser_params(cfg, 999).scalar_count());

  auto wider = cfg;
  wider.base_channels *= 2;
  // Conv-dominated scaling: close to 4x when width doubles.
  double ratio = double(param_count(wider)) / double(param_count(cfg));
  CHECK(ratio > 2.0);
  CHECK(ratio < 4.5);

  auto degenerate = cfg;
  degenerate.channel_mults = {};
  degenerate.attention_levels = {};
  auto pm = init_denoiser_params(degenerate, 1);
  CHECK(pm.contains("unet.stem.w"));
  CHECK(pm.contains("unet.head.conv.w"));
  CHECK_FALSE(pm.contains("unet.mid.b0.conv1.w"));
}

TEST_CASE("non-finite activations are reported with a stage name") {
  auto cfg = tiny_config();
  auto pm = init_denoiser_params(cfg, 10);
  auto& sw = pm.at("unet.stem.w");
  sw.ptr()[0] = std::numeric_limits<float>::quiet_NaN();
  Rng rng(8);
  auto x = Tensor::randn({1, 3, 16, 16}, rng);
  NoGradGuard ng;
  CHECK_THROWS_AS(
      denoise(pm, cfg, x, 5, Bundle::empty(), DropoutMask::all()),
      NumericError);
}

TEST_CASE("batched denoiser groups equal bundles and matches row-by-row") {
  auto cfg = tiny_config();
  auto pm = init_denoiser_params(cfg, 11);
  {
    Rng hr(81);
    auto& hw = pm.at("unet.head.conv.w");
    for (int64_t i = 0; i < hw.numel(); ++i)
      hw.ptr()[i] = float(hr.normal()) * 0.05f;
  }
  Rng rng(9);
  auto a = demo_bundle(rng, 16);
  auto x = Tensor::randn({4, 3, 16, 16}, rng);
  std::vector<Bundle> bundles = {a, Bundle::empty(), a, Bundle::empty()};

  auto fn = make_batch_denoiser(pm, cfg);
  auto out = fn(x, 66, bundles);
  REQUIRE(out.shape() == x.shape());

  NoGradGuard ng;
  int64_t rn = 3 * 16 * 16;
  for (int64_t r = 0; r < 4; ++r) {
    auto xr = Tensor::zeros({1, 3, 16, 16});
    std::copy_n(x.ptr() + r * rn, rn, xr.ptr());
    auto er = denoise(pm, cfg, xr, 66, bundles[size_t(r)], DropoutMask::all());
    CHECK(std::memcmp(er.ptr(), out.ptr() + r * rn, sizeof(float) * rn) == 0);
  }
  CHECK_THROWS_AS(fn(x, 66, {a}), ShapeError);
}
