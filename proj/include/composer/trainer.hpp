#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "composer/conditioning.hpp"
#include "composer/decompose.hpp"
#include "composer/diffusion.hpp"
#include "composer/errors.hpp"
#include "composer/image.hpp"
#include "composer/params.hpp"
#include "composer/scenes.hpp"
#include "composer/schedule.hpp"
#include "composer/unet.hpp"

namespace composer {

struct TrainConfig {
  int64_t steps = 30000;
  int64_t batch_size = 32;
  double lr = 1.2e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double ema_decay = 0.9999;
  double weight_dropout = 0.1;  // attention/resblock dropout
  double grad_clip = 1.0;       // global-norm clip
  int64_t diffusion_steps = 1000;
  ScheduleKind schedule = ScheduleKind::kCosine;
  uint64_t seed = 0;
  int64_t checkpoint_every = 1000;

  void validate() const {
    if (steps <= 0 || batch_size <= 0)
      throw ContractError("train config: steps and batch_size must be positive");
    if (!(ema_decay > 0.0) || !(ema_decay < 1.0))
      throw ContractError("train config: ema_decay must lie in (0,1)");
    if (lr <= 0.0) throw ContractError("train config: lr must be positive");
    if (weight_dropout < 0.0 || weight_dropout >= 1.0)
      throw ContractError("train config: weight_dropout must lie in [0,1)");
    if (diffusion_steps < 2)
      throw ContractError("train config: diffusion_steps must be >= 2");
  }
};

// First and second moment accumulators, keyed like the parameter map.
struct AdamState {
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
  int64_t step = 0;  // completed optimizer steps (bias correction uses step+1)
};

// Global-norm gradient clipping; returns the pre-clip norm.
inline double clip_grads(ParamMap& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params.tensors) {
    if (!p.has_grad()) throw ContractError("clip_grads: missing grad for " + name);
    const auto& g = p.grad();
    for (float gi : g) sq += double(gi) * double(gi);
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    float scale = float(max_norm / norm);
    for (auto& [name, p] : params.tensors) {
      float* g = p.node()->ensure_grad();
      for (int64_t i = 0; i < p.numel(); ++i) g[i] *= scale;
    }
  }
  return norm;
}

// Standard bias-corrected Adam over the gradients currently stored on the
// parameter map. State keys are created on first use and must match the
// parameter key set afterwards.
inline void adam_step(ParamMap& params, AdamState& st,
                      const TrainConfig& cfg) {
  st.step += 1;
  double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  double b1c = 1.0 - std::pow(b1, double(st.step));
  double b2c = 1.0 - std::pow(b2, double(st.step));
  for (auto& [name, p] : params.tensors) {
    if (!p.has_grad())
      throw ContractError("adam_step: missing grad for " + name);
    auto& m = st.m[name];
    auto& v = st.v[name];
    size_t n = size_t(p.numel());
    if (m.empty()) m.assign(n, 0.0f);
    if (v.empty()) v.assign(n, 0.0f);
    if (m.size() != n || v.size() != n)
      throw ContractError("adam_step: state size mismatch for " + name);
    const auto& g = p.grad();
    float* w = p.ptr();
    for (size_t i = 0; i < n; ++i) {
      double gi = g[i];
      m[i] = float(b1 * m[i] + (1.0 - b1) * gi);
      v[i] = float(b2 * v[i] + (1.0 - b2) * gi * gi);
      double mh = m[i] / b1c;
      double vh = v[i] / b2c;
      w[i] -= float(cfg.lr * mh / (std::sqrt(vh) + cfg.adam_eps));
    }
  }
  if (st.m.size() != params.tensors.size())
    throw ContractError("adam_step: state keys do not match params");
}

// ema <- decay * ema + (1 - decay) * live, per tensor.
template <typename T>
void ema_update(ParamMapT<T>& ema, const ParamMapT<T>& live, double decay) {
  if (ema.tensors.size() != live.tensors.size())
    throw ContractError("ema_update: key sets differ");
  auto it = ema.tensors.begin();
  auto jt = live.tensors.begin();
  for (; it != ema.tensors.end(); ++it, ++jt) {
    if (it->first != jt->first)
      throw ContractError("ema_update: key mismatch at " + it->first);
    if (it->second.numel() != jt->second.numel())
      throw ContractError("ema_update: size mismatch at " + it->first);
    T* e = it->second.ptr();
    const T* l = jt->second.ptr();
    T d = T(decay);
    for (int64_t i = 0; i < it->second.numel(); ++i)
      e[i] = d * e[i] + (T(1) - d) * l[i];
  }
}

// Counters for the empirically-verified dropout strategy marginals.
struct DropoutStats {
  int64_t draws = 0;
  int64_t none_mode = 0;  // everything dropped
  int64_t all_mode = 0;   // everything kept
  std::array<int64_t, kNumSlots> kept{};

  void record(const DropoutMask& m) {
    draws += 1;
    bool any = false, every = true;
    for (Slot s : all_slots()) {
      bool k = m.kept(s);
      any = any || k;
      every = every && k;
      kept[size_t(s)] += k ? 1 : 0;
    }
    none_mode += any ? 0 : 1;
    all_mode += every ? 1 : 0;
  }
};

// Joint multi-condition training: on-the-fly decomposition, the dropout
// strategy, Adam with global-norm clipping, and EMA shadow weights. All
// stochastic choices flow from the single seeded rng in a fixed per-record
// order, so runs are bitwise reproducible.
class Trainer {
 public:
  Trainer(const UNetConfig& ucfg, const TrainConfig& tcfg)
      : ucfg_(ucfg),
        tcfg_(tcfg),
        sched_(make_schedule(tcfg.schedule, tcfg.diffusion_steps)),
        params_(init_denoiser_params(ucfg, tcfg.seed)),
        ema_(param_clone(params_)),
        rng_(tcfg.seed ^ 0xC0FFEE5EEDull) {
    tcfg_.validate();
  }

  // Resumption: adopt previously trained maps (checkpoint loading).
  Trainer(const UNetConfig& ucfg, const TrainConfig& tcfg, ParamMap live,
          ParamMap ema, AdamState adam, int64_t step)
      : ucfg_(ucfg),
        tcfg_(tcfg),
        sched_(make_schedule(tcfg.schedule, tcfg.diffusion_steps)),
        params_(std::move(live)),
        ema_(std::move(ema)),
        adam_(std::move(adam)),
        rng_(Rng(tcfg.seed ^ 0xC0FFEE5EEDull).split(uint64_t(step))),
        step_(step) {
    tcfg_.validate();
  }

  struct StepStats {
    double loss = 0.0;
    double grad_norm = 0.0;
  };

  // One optimizer step over a batch of records: per record decompose_all ->
  // sample_dropout -> t ~ U{1..T} -> q_sample -> denoise -> MSE, averaged.
  StepStats train_step(const std::vector<DatasetRecord>& batch) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    params_.zero_grads();
    int64_t b = int64_t(batch.size());
    double total = 0.0;
    for (const auto& rec : batch) {
      auto bundle = decompose_all(rec, rng_);
      auto mask = sample_dropout(rng_);
      stats_.record(mask);
      int64_t t = rng_.uniform_int(1, int(sched_.steps));
      auto x0 = to_model_range(rec.image);
      auto eps = Tensor::randn(x0.shape(), rng_);
      auto x_t = q_sample(x0, t, eps, sched_);
      ForwardCtx ctx{&rng_, tcfg_.weight_dropout};
      auto pred = denoise(params_, ucfg_,
                          reshape(x_t, {1, x0.dim(0), x0.dim(1), x0.dim(2)}),
                          t, bundle, mask, ctx);
      auto loss = diffusion_loss(
          pred, reshape(eps, {1, x0.dim(0), x0.dim(1), x0.dim(2)}));
      total += double(loss.item());
      // Backward on loss/B accumulates the batch-mean gradient sample by
      // sample, bounding graph memory to a single record.
      mul_scalar(loss, 1.0f / float(b)).backward();
    }
    total /= double(b);
    if (!std::isfinite(total))
      throw NumericError("train_step: non-finite loss at step " +
                         std::to_string(step_));
    for (auto& [name, p] : params_.tensors) p.node()->ensure_grad();
    double gnorm = clip_grads(params_, tcfg_.grad_clip);
    adam_step(params_, adam_, tcfg_);
    ema_update(ema_, params_, tcfg_.ema_decay);
    params_.zero_grads();
    step_ += 1;
    return {total, gnorm};
  }

  const UNetConfig& unet_config() const { return ucfg_; }
  const TrainConfig& train_config() const { return tcfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  ParamMap& live() { return params_; }
  ParamMap& ema() { return ema_; }
  AdamState& adam() { return adam_; }
  const DropoutStats& dropout_stats() const { return stats_; }
  DropoutStats& dropout_stats() { return stats_; }  // counter restoration
  int64_t step() const { return step_; }
  Rng& rng() { return rng_; }

 private:
  UNetConfig ucfg_;
  TrainConfig tcfg_;
  NoiseSchedule sched_;
  ParamMap params_;
  ParamMap ema_;
  AdamState adam_;
  Rng rng_;
  int64_t step_ = 0;
  DropoutStats stats_;
};

// key=value encodings shared by checkpoints and the CLI config file.
std::map<std::string, std::string> encode_unet_config(const UNetConfig& c);
UNetConfig decode_unet_config(const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> encode_train_config(const TrainConfig& c);
TrainConfig decode_train_config(const std::map<std::string, std::string>& kv);

}  // namespace composer
