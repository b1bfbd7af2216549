#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "composer/checkpoint.hpp"
#include "composer/serialize.hpp"
#include "composer/dataset.hpp"
#include "composer/trainer.hpp"

using namespace composer;
namespace fs = std::filesystem;

namespace {

UNetConfig tiny_unet() {
  UNetConfig cfg;
  cfg.base_channels = 16;
  cfg.channel_mults = {1, 2};
  cfg.blocks_per_level = 1;
  cfg.attention_levels = {1};
  cfg.head_channels = 8;
  cfg.model_dim = 32;
  cfg.image_size = 64;
  cfg.local_channels = 8;
  cfg.norm_groups = 4;
  return cfg;
}

TrainConfig tiny_train(uint64_t seed = 7) {
  TrainConfig t;
  t.steps = 4;
  t.batch_size = 2;
  t.seed = seed;
  t.checkpoint_every = 2;
  return t;
}

std::vector<DatasetRecord> scenes(uint64_t first, int n) {
  std::vector<DatasetRecord> out;
  for (int i = 0; i < n; ++i) out.push_back(gen_scene(first + uint64_t(i)));
  return out;
}

fs::path temp_dir(const char* tag) {
  auto dir = fs::temp_directory_path() /
             (std::string("composer_trainer_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("adam first step with unit gradient moves by exactly -lr") {
  ParamMap pm;
  pm.create("w", Tensor::zeros({3}));
  float* g = pm.at("w").node()->ensure_grad();
  g[0] = g[1] = g[2] = 1.0f;
  AdamState st;
  TrainConfig cfg;
  cfg.lr = 0.25;
  adam_step(pm, st, cfg);
  for (int i = 0; i < 3; ++i)
    CHECK(pm.at("w").ptr()[i] ==
          doctest::Approx(-0.25).epsilon(1e-6));
  CHECK(st.step == 1);
}

TEST_CASE("adam with zero gradients leaves fresh params unchanged") {
  ParamMap pm;
  Rng rng(3);
  pm.create("w", Tensor::randn({5}, rng));
  auto before = pm.at("w").clone();
  pm.at("w").node()->ensure_grad();  // zero-filled
  AdamState st;
  adam_step(pm, st, TrainConfig{});
  for (int i = 0; i < 5; ++i)
    CHECK(pm.at("w").ptr()[i] == before.ptr()[i]);
}

TEST_CASE("adam determinism and missing-grad contract") {
  auto run = [] {
    ParamMap pm;
    Rng rng(9);
    pm.create("a", Tensor::randn({4}, rng));
    pm.create("b", Tensor::randn({2}, rng));
    AdamState st;
    TrainConfig cfg;
    for (int s = 0; s < 3; ++s) {
      for (auto& [n, p] : pm.tensors) {
        float* g = p.node()->ensure_grad();
        for (int64_t i = 0; i < p.numel(); ++i)
          g[i] = float(0.1 * (s + 1) * (i + 1));
      }
      adam_step(pm, st, cfg);
      pm.zero_grads();
    }
    return std::make_pair(pm.at("a").clone(), pm.at("b").clone());
  };
  auto [a1, b1] = run();
  auto [a2, b2] = run();
  for (int64_t i = 0; i < 4; ++i) CHECK(a1.ptr()[i] == a2.ptr()[i]);
  for (int64_t i = 0; i < 2; ++i) CHECK(b1.ptr()[i] == b2.ptr()[i]);

  ParamMap pm;
  pm.create("w", Tensor::zeros({1}));
  AdamState st;
  CHECK_THROWS_AS(adam_step(pm, st, TrainConfig{}), ContractError);
}

TEST_CASE("ema update arithmetic") {
  ParamMap ema, live;
  ema.create("w", Tensor::zeros({2}));
  live.create("w", Tensor::ones({2}));

  ema_update(ema, live, 0.9999);
  CHECK(ema.at("w").ptr()[0] ==
        doctest::Approx(0.0001).epsilon(1e-3));  // fp32 1-decay roundoff

  auto e2 = param_clone(live);
  for (int64_t i = 0; i < 2; ++i) e2.at("w").ptr()[i] = 5.0f;
  ema_update(e2, live, 1.0 - 1e-12);  // decay ~ 1: unchanged to fp precision
  CHECK(e2.at("w").ptr()[0] == doctest::Approx(5.0));
  ema_update(e2, live, 0.0);  // decay 0: copy of live
  CHECK(e2.at("w").ptr()[0] == 1.0f);

  ParamMap other;
  other.create("x", Tensor::zeros({2}));
  CHECK_THROWS_AS(ema_update(other, live, 0.5), ContractError);
}

TEST_CASE("gradient clipping at global norm") {
  ParamMap pm;
  pm.create("a", Tensor::zeros({3}));
  pm.create("b", Tensor::zeros({1}));
  float* ga = pm.at("a").node()->ensure_grad();
  float* gb = pm.at("b").node()->ensure_grad();
  ga[0] = 3.0f;
  ga[1] = 0.0f;
  ga[2] = 4.0f;
  gb[0] = 0.0f;
  double norm = clip_grads(pm, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  double after = 0;
  for (int i = 0; i < 3; ++i) after += double(ga[i]) * ga[i];
  after += double(gb[0]) * gb[0];
  CHECK(std::sqrt(after) == doctest::Approx(1.0).epsilon(1e-6));

  // Below the threshold the gradients pass through untouched.
  ga[0] = 0.3f;
  ga[2] = 0.4f;
  CHECK(clip_grads(pm, 1.0) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(ga[0] == 0.3f);
}

TEST_CASE("two training runs with identical seeds match bitwise") {
  auto batch = scenes(100, 2);
  auto run = [&](uint64_t seed) {
    Trainer tr(tiny_unet(), tiny_train(seed));
    std::vector<double> losses;
    for (int s = 0; s < 3; ++s)
      losses.push_back(tr.train_step(batch).loss);
    return std::make_pair(losses, tr.live().at("unet.head.conv.w").clone());
  };
  auto [l1, w1] = run(7);
  auto [l2, w2] = run(7);
  for (int s = 0; s < 3; ++s)
    CHECK(std::memcmp(&l1[size_t(s)], &l2[size_t(s)], sizeof(double)) == 0);
  for (int64_t i = 0; i < w1.numel(); ++i) CHECK(w1.ptr()[i] == w2.ptr()[i]);

  auto [l3, w3] = run(8);
  bool weights_differ = false;
  for (int64_t i = 0; i < w1.numel() && !weights_differ; ++i)
    weights_differ = w1.ptr()[i] != w3.ptr()[i];
  CHECK(weights_differ);
}

TEST_CASE("loss at step zero is the variance of unit noise") {
  // The zero-initialised head predicts 0, so the first loss is E[eps^2] = 1
  // up to sample noise across a batch of 3x64x64 draws.
  auto batch = scenes(500, 4);
  Trainer tr(tiny_unet(), tiny_train(21));
  auto stats = tr.train_step(batch);
  CHECK(stats.loss == doctest::Approx(1.0).epsilon(0.2));
  CHECK(stats.grad_norm > 0.0);

  // A couple more steps keep the loss finite and the EMA tracking.
  for (int s = 0; s < 2; ++s) CHECK(std::isfinite(tr.train_step(batch).loss));
  CHECK(tr.step() == 3);
  CHECK(tr.dropout_stats().draws == 12);
}

TEST_CASE("ema stays between initial and live weights during training") {
  auto batch = scenes(900, 2);
  TrainConfig tc = tiny_train(5);
  tc.ema_decay = 0.5;  // fast for the test
  Trainer tr(tiny_unet(), tc);
  auto w0 = tr.live().at("unet.stem.w").clone();
  for (int s = 0; s < 3; ++s) tr.train_step(batch);
  auto& live = tr.live().at("unet.stem.w");
  auto& ema = tr.ema().at("unet.stem.w");
  // EMA must have moved off the init but not as far as live (on average).
  double d_ema = 0, d_live = 0;
  for (int64_t i = 0; i < w0.numel(); ++i) {
    d_ema += std::abs(double(ema.ptr()[i]) - w0.ptr()[i]);
    d_live += std::abs(double(live.ptr()[i]) - w0.ptr()[i]);
  }
  CHECK(d_ema > 0.0);
  CHECK(d_ema < d_live);
}

TEST_CASE("checkpoint round trip is bit-exact and digest-guarded") {
  auto dir = temp_dir("ckpt");
  auto batch = scenes(300, 2);
  Trainer tr(tiny_unet(), tiny_train(11));
  tr.train_step(batch);

  Checkpoint ck;
  ck.live = param_clone(tr.live());
  ck.ema = param_clone(tr.ema());
  ck.adam = tr.adam();
  ck.step = tr.step();
  ck.config = encode_unet_config(tr.unet_config());
  auto tc = encode_train_config(tr.train_config());
  ck.config.insert(tc.begin(), tc.end());
  save_checkpoint(dir / "a", ck);

  auto back = load_checkpoint(dir / "a");
  CHECK(back.step == 1);
  REQUIRE(back.live.names() == ck.live.names());
  REQUIRE(back.ema.names() == ck.ema.names());
  for (const auto& n : ck.live.names()) {
    CHECK(std::memcmp(back.live.at(n).ptr(), ck.live.at(n).ptr(),
                      sizeof(float) * size_t(ck.live.at(n).numel())) == 0);
    CHECK(std::memcmp(back.ema.at(n).ptr(), ck.ema.at(n).ptr(),
                      sizeof(float) * size_t(ck.ema.at(n).numel())) == 0);
  }
  CHECK(back.adam.m == tr.adam().m);
  CHECK(back.adam.v == tr.adam().v);
  CHECK(back.adam.step == tr.adam().step);
  CHECK(decode_unet_config(back.config).base_channels == 16);
  CHECK(decode_train_config(back.config).batch_size == 2);

  // Save -> load -> save: byte-identical files.
  save_checkpoint(dir / "b", back);
  auto digest_of = [](const fs::path& p) { return sha256_file(p); };
  CHECK(digest_of(dir / "a" / "manifest.txt") ==
        digest_of(dir / "b" / "manifest.txt"));
  for (const auto& entry : fs::directory_iterator(dir / "a" / "tensors")) {
    auto rel = entry.path().filename();
    CHECK(digest_of(entry.path()) == digest_of(dir / "b" / "tensors" / rel));
  }

  // Tamper with one payload byte: load must fail naming the tensor.
  auto victim = dir / "a" / "tensors" / "live.unet.stem.w.ctsr";
  {
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    REQUIRE(f.good());
    f.seekp(-1, std::ios::end);
    char c;
    f.seekg(-1, std::ios::end);
    f.get(c);
    f.seekp(-1, std::ios::end);
    f.put(char(c ^ 0x01));
  }
  try {
    load_checkpoint(dir / "a");
    FAIL("tampered checkpoint loaded");
  } catch (const CorruptionError& e) {
    CHECK(std::string(e.what()).find("live.unet.stem.w") !=
          std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("resumed trainer continues from the restored state") {
  auto batch = scenes(700, 2);
  Trainer tr(tiny_unet(), tiny_train(13));
  tr.train_step(batch);
  Trainer resumed(tr.unet_config(), tr.train_config(),
                  param_clone(tr.live()), param_clone(tr.ema()), tr.adam(),
                  tr.step());
  CHECK(resumed.step() == 1);
  auto s = resumed.train_step(batch);
  CHECK(std::isfinite(s.loss));
  CHECK(resumed.step() == 2);
}

TEST_CASE("dataset round trip through the on-disk layout") {
  auto dir = temp_dir("data");
  auto records = scenes(42, 3);
  write_dataset(dir, records);
  auto back = load_dataset(dir);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].caption_text == records[i].caption_text);
    CHECK(back[i].caption == records[i].caption);
    CHECK(back[i].seed == records[i].seed);
    // Depth and instances ride in CTSR: exact. Image rides in 8-bit PPM:
    // equal to within quantization.
    CHECK(std::memcmp(back[i].depth.ptr(), records[i].depth.ptr(),
                      sizeof(float) * size_t(records[i].depth.numel())) == 0);
    CHECK(std::memcmp(back[i].instances.ptr(), records[i].instances.ptr(),
                      sizeof(float) *
                          size_t(records[i].instances.numel())) == 0);
    double max_err = 0;
    for (int64_t j = 0; j < back[i].image.numel(); ++j)
      max_err = std::max(max_err, std::abs(double(back[i].image.ptr()[j]) -
                                           records[i].image.ptr()[j]));
    CHECK(max_err <= 0.5 / 255.0 + 1e-6);
  }
  fs::remove_all(dir);
}
