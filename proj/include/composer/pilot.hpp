#pragma once

#include <cstdint>
#include <vector>

#include "composer/scenes.hpp"
#include "composer/trainer.hpp"
#include "composer/unet.hpp"

namespace composer {

// The pinned desk-scale training run behind the trained-model gate: a small
// denoiser trained on procedural scenes, every seed fixed so the run (and
// everything evaluated against it) is reproducible. Training scenes come
// from one seed range, evaluation scenes from a disjoint one.
struct PilotProfile {
  UNetConfig unet;
  TrainConfig train;
  int64_t dataset_size = 4096;
  uint64_t data_seed = 1000000;     // training scene i = gen_scene(data_seed + i)
  uint64_t holdout_seed = 9000000;  // held-out scene i = gen_scene(holdout_seed + i)
};

inline PilotProfile pilot_profile() {
  PilotProfile p;
  p.unet.base_channels = 24;
  p.unet.channel_mults = {1, 2, 2};
  p.unet.blocks_per_level = 1;
  p.unet.attention_levels = {2};
  p.unet.head_channels = 24;
  p.unet.model_dim = 128;
  p.unet.image_size = 64;
  p.unet.local_channels = 16;
  p.unet.norm_groups = 8;
  p.train.steps = 6000;
  p.train.batch_size = 8;
  p.train.lr = 1.2e-4;
  // Shorter averaging horizon than the web-scale default: at a few thousand
  // steps a 0.9999 shadow would still be mostly the initialization.
  p.train.ema_decay = 0.999;
  p.train.weight_dropout = 0.1;
  p.train.grad_clip = 1.0;
  p.train.diffusion_steps = 1000;
  p.train.schedule = ScheduleKind::kCosine;
  p.train.seed = 424242;
  p.train.checkpoint_every = 500;
  return p;
}

// Deterministic batch for one optimizer step: records cycle through the
// procedural dataset in fixed order, regenerated on demand (nothing touches
// disk).
inline std::vector<DatasetRecord> pilot_batch(const PilotProfile& p,
                                              int64_t step) {
  std::vector<DatasetRecord> out;
  out.reserve(static_cast<size_t>(p.train.batch_size));
  for (int64_t j = 0; j < p.train.batch_size; ++j) {
    int64_t idx = (step * p.train.batch_size + j) % p.dataset_size;
    out.push_back(gen_scene(p.data_seed + static_cast<uint64_t>(idx)));
  }
  return out;
}

inline DatasetRecord pilot_holdout(const PilotProfile& p, int64_t i) {
  return gen_scene(p.holdout_seed + static_cast<uint64_t>(i));
}

}  // namespace composer
