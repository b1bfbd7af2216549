#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "composer/bundle.hpp"
#include "composer/errors.hpp"
#include "composer/rng.hpp"
#include "composer/schedule.hpp"
#include "composer/tensor.hpp"

namespace composer {

// (c1, c2, omega): conditions in c2\c1 act with weight omega, c1\c2 with
// (1 - omega), c1 n c2 with 1.0.
template <typename T>
struct GuidanceSpecT {
  BundleT<T> c1;
  BundleT<T> c2;
  double omega = 1.0;
};

using GuidanceSpec = GuidanceSpecT<float>;

template <typename T>
struct DiffusionStateT {
  TensorT<T> x;
  int64_t t = 0;
};

using DiffusionState = DiffusionStateT<float>;

// Denoiser over a batch: x [B,C,H,W], shared step t, one bundle per sample.
template <typename T>
using BatchDenoiseFn = std::function<TensorT<T>(
    const TensorT<T>& x, int64_t t, const std::vector<BundleT<T>>& bundles)>;

// Single-sample denoiser: x [C,H,W].
template <typename T>
using DenoiseFn = std::function<TensorT<T>(const TensorT<T>& x, int64_t t,
                                           const BundleT<T>& bundle)>;

template <typename T>
BatchDenoiseFn<T> lift_denoiser(DenoiseFn<T> f) {
  return [f = std::move(f)](const TensorT<T>& x, int64_t t,
                            const std::vector<BundleT<T>>& bundles) {
    if (x.dim(0) != static_cast<int64_t>(bundles.size()))
      throw ShapeError("lift_denoiser: batch size mismatch");
    std::vector<TensorT<T>> outs;
    outs.reserve(bundles.size());
    Shape single(x.shape().begin() + 1, x.shape().end());
    for (size_t i = 0; i < bundles.size(); ++i) {
      auto xi = reshape(slice(x, 0, static_cast<int64_t>(i), 1), single);
      outs.push_back(f(xi, t, bundles[i]));
    }
    return stack(outs);
  };
}

// a_t * x0 + sigma_t * eps.
template <typename T>
TensorT<T> q_sample(const TensorT<T>& x0, int64_t t, const TensorT<T>& eps,
                    const NoiseSchedule& s) {
  if (x0.shape() != eps.shape())
    throw ShapeError("q_sample: x0/eps shape mismatch");
  if (t < 0 || t > s.steps) throw ContractError("q_sample: t out of range");
  T a = static_cast<T>(s.a_at(t));
  T sig = static_cast<T>(s.sigma_at(t));
  return add(mul_scalar(x0, a), mul_scalar(eps, sig));
}

// Mean squared error over all elements.
template <typename T>
TensorT<T> diffusion_loss(const TensorT<T>& eps_pred, const TensorT<T>& eps) {
  if (eps_pred.shape() != eps.shape())
    throw ShapeError("diffusion_loss: shape mismatch");
  auto d = sub(eps_pred, eps);
  return mean(mul(d, d));
}

// omega * eps_cond + (1 - omega) * eps_uncond.
template <typename T>
TensorT<T> cfg(const TensorT<T>& eps_cond, const TensorT<T>& eps_uncond,
               double omega) {
  if (eps_cond.shape() != eps_uncond.shape())
    throw ShapeError("cfg: shape mismatch");
  return add(mul_scalar(eps_cond, static_cast<T>(omega)),
             mul_scalar(eps_uncond, static_cast<T>(1.0 - omega)));
}

// Batched two-set guidance: omega * eps(c2) + (1 - omega) * eps(c1) per row.
// Rows with omega = 1 or c1 = c2 skip the second denoiser evaluation.
template <typename T>
TensorT<T> set_guidance_batch(const BatchDenoiseFn<T>& denoise,
                              const TensorT<T>& x, int64_t t,
                              const std::vector<GuidanceSpecT<T>>& specs) {
  int64_t b = x.dim(0);
  if (b != static_cast<int64_t>(specs.size()))
    throw ShapeError("set_guidance_batch: batch size mismatch");
  std::vector<BundleT<T>> c2s;
  c2s.reserve(specs.size());
  for (const auto& sp : specs) c2s.push_back(sp.c2);
  TensorT<T> e2 = denoise(x, t, c2s);
  if (e2.shape() != x.shape())
    throw ShapeError("set_guidance_batch: denoiser output shape mismatch");

  std::vector<int64_t> need;  // rows that actually need the c1 term
  for (int64_t i = 0; i < b; ++i)
    if (specs[i].omega != 1.0 && !bundle_equal(specs[i].c1, specs[i].c2))
      need.push_back(i);
  if (need.empty()) return e2;

  std::vector<TensorT<T>> rows;
  std::vector<BundleT<T>> c1s;
  for (int64_t i : need) {
    rows.push_back(slice(x, 0, i, 1));
    c1s.push_back(specs[static_cast<size_t>(i)].c1);
  }
  TensorT<T> e1 = denoise(concat(rows, 0), t, c1s);

  TensorT<T> out = e2.clone();
  int64_t row_n = e2.numel() / b;
  for (size_t j = 0; j < need.size(); ++j) {
    int64_t i = need[j];
    T w2 = static_cast<T>(specs[static_cast<size_t>(i)].omega);
    T w1 = static_cast<T>(1.0 - specs[static_cast<size_t>(i)].omega);
    T* po = out.ptr() + i * row_n;
    const T* p2 = e2.ptr() + i * row_n;
    const T* p1 = e1.ptr() + static_cast<int64_t>(j) * row_n;
    for (int64_t k = 0; k < row_n; ++k) po[k] = w2 * p2[k] + w1 * p1[k];
  }
  return out;
}

// Single-sample surface: omega * denoise(x,t,c2) + (1-omega) * denoise(x,t,c1).
template <typename T>
TensorT<T> set_guidance(const DenoiseFn<T>& denoise,
                        const DiffusionStateT<T>& state,
                        const GuidanceSpecT<T>& spec) {
  TensorT<T> e2 = denoise(state.x, state.t, spec.c2);
  if (spec.omega == 1.0 || bundle_equal(spec.c1, spec.c2)) return e2;
  TensorT<T> e1 = denoise(state.x, state.t, spec.c1);
  return cfg(e2, e1, spec.omega);
}

namespace detail {

template <typename T>
void check_divisible(const NoiseSchedule& s, int64_t t) {
  if (s.a_at(t) < 1e-6)
    throw SingularityError("ddim: a_t below 1e-6 at t=" + std::to_string(t));
}

// Shared jump update: x0_pred = (x - sigma_src * eps) / a_src;
// x' = a_dst * x0_pred + sigma_dst * eps.
template <typename T>
TensorT<T> ddim_jump(const TensorT<T>& x, const TensorT<T>& eps_hat,
                     const NoiseSchedule& s, int64_t t_src, int64_t t_dst) {
  if (x.shape() != eps_hat.shape())
    throw ShapeError("ddim: x/eps shape mismatch");
  check_divisible<T>(s, t_src);
  T a_src = static_cast<T>(s.a_at(t_src));
  T sig_src = static_cast<T>(s.sigma_at(t_src));
  T a_dst = static_cast<T>(s.a_at(t_dst));
  T sig_dst = static_cast<T>(s.sigma_at(t_dst));
  auto x0_pred = mul_scalar(sub(x, mul_scalar(eps_hat, sig_src)), T(1) / a_src);
  return add(mul_scalar(x0_pred, a_dst), mul_scalar(eps_hat, sig_dst));
}

}  // namespace detail

// Deterministic (eta = 0) reverse update t -> t-1.
template <typename T>
DiffusionStateT<T> ddim_step(const DiffusionStateT<T>& state,
                             const TensorT<T>& eps_hat,
                             const NoiseSchedule& s) {
  if (state.t < 1) throw ContractError("ddim_step: t must be >= 1");
  return {detail::ddim_jump(state.x, eps_hat, s, state.t, state.t - 1),
          state.t - 1};
}

// Exact algebraic inverse of ddim_step under fixed eps_hat: t -> t+1.
template <typename T>
DiffusionStateT<T> ddim_invert_step(const DiffusionStateT<T>& state,
                                    const TensorT<T>& eps_hat,
                                    const NoiseSchedule& s) {
  if (state.t > s.steps - 1)
    throw ContractError("ddim_invert_step: t must be <= T-1");
  return {detail::ddim_jump(state.x, eps_hat, s, state.t, state.t + 1),
          state.t + 1};
}

// Generalized jumps over a subsampled grid (used by the loops).
template <typename T>
DiffusionStateT<T> ddim_step_to(const DiffusionStateT<T>& state,
                                const TensorT<T>& eps_hat,
                                const NoiseSchedule& s, int64_t t_dst) {
  if (t_dst >= state.t) throw ContractError("ddim_step_to: must move down");
  return {detail::ddim_jump(state.x, eps_hat, s, state.t, t_dst), t_dst};
}

template <typename T>
DiffusionStateT<T> ddim_invert_step_to(const DiffusionStateT<T>& state,
                                       const TensorT<T>& eps_hat,
                                       const NoiseSchedule& s, int64_t t_dst) {
  if (t_dst <= state.t)
    throw ContractError("ddim_invert_step_to: must move up");
  return {detail::ddim_jump(state.x, eps_hat, s, state.t, t_dst), t_dst};
}

template <typename T>
void check_latent_finite(const TensorT<T>& x, int64_t t) {
  for (T v : x.data())
    if (!std::isfinite(v))
      throw NumericError("non-finite latent at step t=" + std::to_string(t));
}

// Batched deterministic sampler from caller-provided starting noise
// x_start [B,C,H,W] at t = T. Returns x_0 clamped to [-1, 1].
template <typename T>
TensorT<T> sample_loop_from(const BatchDenoiseFn<T>& denoise,
                            const std::vector<GuidanceSpecT<T>>& specs,
                            const NoiseSchedule& s, int64_t steps,
                            TensorT<T> x_start) {
  NoGradGuard ng;
  auto tau = step_grid(s, steps);
  TensorT<T> x = std::move(x_start);
  for (int64_t i = steps; i >= 1; --i) {
    int64_t t_hi = tau[static_cast<size_t>(i)];
    int64_t t_lo = tau[static_cast<size_t>(i - 1)];
    TensorT<T> eps_hat = set_guidance_batch(denoise, x, t_hi, specs);
    x = detail::ddim_jump(x, eps_hat, s, t_hi, t_lo);
    check_latent_finite(x, t_lo);
  }
  return clamp(x, T(-1), T(1));
}

// Seeded batched sampler: x_T drawn per sample from split rng streams.
template <typename T>
TensorT<T> sample_loop_batch(const BatchDenoiseFn<T>& denoise,
                             const std::vector<GuidanceSpecT<T>>& specs,
                             const NoiseSchedule& s, int64_t steps,
                             uint64_t seed, Shape sample_shape) {
  Shape full = sample_shape;
  full.insert(full.begin(), static_cast<int64_t>(specs.size()));
  Rng root(seed);
  std::vector<T> init(static_cast<size_t>(shape_numel(full)));
  int64_t per = shape_numel(sample_shape);
  for (size_t b = 0; b < specs.size(); ++b) {
    Rng stream = root.split(static_cast<uint64_t>(b));
    for (int64_t i = 0; i < per; ++i)
      init[b * static_cast<size_t>(per) + static_cast<size_t>(i)] =
          static_cast<T>(stream.normal());
  }
  return sample_loop_from(denoise, specs, s, steps,
                          TensorT<T>::from(full, std::move(init)));
}

// Single-sample spec'd surface: seeded standard-normal x_T, guided DDIM down
// the subsampled grid, output clamped to [-1, 1].
template <typename T>
TensorT<T> sample_loop(const DenoiseFn<T>& denoise,
                       const GuidanceSpecT<T>& spec, const NoiseSchedule& s,
                       int64_t steps, uint64_t seed, Shape sample_shape) {
  auto batched = lift_denoiser<T>(denoise);
  auto out = sample_loop_batch(batched, {spec}, s, steps, seed, sample_shape);
  return reshape(out, sample_shape);
}

// Batched deterministic inversion of images to latents (guidance omega = 1).
template <typename T>
TensorT<T> invert_loop_batch(const BatchDenoiseFn<T>& denoise,
                             const std::vector<BundleT<T>>& bundles,
                             const TensorT<T>& images, const NoiseSchedule& s,
                             int64_t steps) {
  NoGradGuard ng;
  if (images.dim(0) != static_cast<int64_t>(bundles.size()))
    throw ShapeError("invert_loop_batch: batch size mismatch");
  if (steps == 0) return images.clone();
  auto tau = step_grid(s, steps);
  TensorT<T> x = images.clone();
  for (int64_t i = 0; i < steps; ++i) {
    int64_t t_lo = tau[static_cast<size_t>(i)];
    int64_t t_hi = tau[static_cast<size_t>(i + 1)];
    TensorT<T> eps_hat = denoise(x, t_lo, bundles);
    x = detail::ddim_jump(x, eps_hat, s, t_lo, t_hi);
    check_latent_finite(x, t_hi);
  }
  return x;
}

// Single-sample spec'd surface.
template <typename T>
TensorT<T> invert_loop(const DenoiseFn<T>& denoise, const BundleT<T>& bundle,
                       const TensorT<T>& image, const NoiseSchedule& s,
                       int64_t steps) {
  auto batched = lift_denoiser<T>(denoise);
  Shape full = image.shape();
  full.insert(full.begin(), 1);
  auto out =
      invert_loop_batch(batched, {bundle}, reshape(image, full), s, steps);
  return reshape(out, image.shape());
}

}  // namespace composer
