#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "composer/bundle.hpp"
#include "composer/conditioning.hpp"
#include "composer/diffusion.hpp"
#include "composer/errors.hpp"
#include "composer/params.hpp"
#include "composer/tensor.hpp"

namespace composer {

struct UNetConfig {
  int64_t base_channels = 64;
  std::vector<int64_t> channel_mults = {1, 2, 4};
  int64_t blocks_per_level = 2;
  std::vector<int64_t> attention_levels = {1, 2};  // level indices
  int64_t head_channels = 32;
  int64_t model_dim = 256;
  int64_t image_size = 64;
  int64_t local_channels = 32;  // E: fused localized-condition channels
  int64_t norm_groups = 8;

  int64_t levels() const {
    return static_cast<int64_t>(channel_mults.size());
  }

  bool has_attention(int64_t level) const {
    for (int64_t a : attention_levels)
      if (a == level) return true;
    return false;
  }

  void validate() const {
    if (base_channels <= 0 || model_dim <= 0 || image_size <= 0)
      throw ContractError("unet config: non-positive size");
    if (model_dim % 2 != 0)
      throw ContractError("unet config: model_dim must be even");
    if (!channel_mults.empty()) {
      int64_t down = int64_t(1) << (levels() - 1);
      if (image_size % down != 0)
        throw ContractError("unet config: image_size not divisible by 2^(levels-1)");
      if (base_channels % head_channels != 0)
        throw ContractError("unet config: base_channels % head_channels != 0");
      for (int64_t l = 0; l < levels(); ++l) {
        int64_t c = base_channels * channel_mults[static_cast<size_t>(l)];
        if (c % norm_groups != 0)
          throw ContractError("unet config: channels not divisible by groups");
        if (has_attention(l) && c % head_channels != 0)
          throw ContractError("unet config: attention channels % head_channels != 0");
      }
      for (int64_t a : attention_levels)
        if (a < 0 || a >= levels())
          throw ContractError("unet config: attention level out of range");
    }
    if (blocks_per_level < 1)
      throw ContractError("unet config: blocks_per_level must be >= 1");
  }
};

// Sinusoidal features: interleaved sin/cos over geometric periods 1..10^4.
template <typename T = float>
TensorT<T> timestep_embedding(int64_t t, int64_t dim) {
  if (dim <= 0 || dim % 2 != 0)
    throw ContractError("timestep_embedding: dim must be positive and even");
  int64_t half = dim / 2;
  std::vector<T> v(static_cast<size_t>(dim));
  for (int64_t i = 0; i < half; ++i) {
    double f = half == 1 ? 1.0
                         : std::exp(-std::log(10000.0) *
                                    static_cast<double>(i) /
                                    static_cast<double>(half - 1));
    v[static_cast<size_t>(2 * i)] = static_cast<T>(std::sin(t * f));
    v[static_cast<size_t>(2 * i + 1)] = static_cast<T>(std::cos(t * f));
  }
  return TensorT<T>::from({dim}, std::move(v));
}

// Optional training-time stochasticity for resblock/attention dropout.
struct ForwardCtx {
  Rng* dropout_rng = nullptr;
  double dropout_p = 0.0;

  bool active() const { return dropout_rng != nullptr && dropout_p > 0.0; }
};

namespace detail_unet {

inline std::string lvl(const char* path, int64_t l) {
  return std::string("unet.") + path + ".l" + std::to_string(l);
}

// Parameter creation for one residual block (order of rng draws is fixed).
inline void create_resblock(ParamMap& pm, const std::string& base, int64_t cin,
                            int64_t cout, int64_t model_dim, Rng& rng) {
  pm.create(base + ".norm1.g", Tensor::ones({cin}));
  pm.create(base + ".norm1.b", Tensor::zeros({cin}));
  pm.create(base + ".conv1.w", init::conv_weight({cout, cin, 3, 3}, rng));
  pm.create(base + ".conv1.b", Tensor::zeros({cout}));
  pm.create(base + ".temb.w", init::linear_weight(model_dim, 2 * cout, rng));
  pm.create(base + ".temb.b", Tensor::zeros({2 * cout}));
  pm.create(base + ".norm2.g", Tensor::ones({cout}));
  pm.create(base + ".norm2.b", Tensor::zeros({cout}));
  auto w2 = init::conv_weight({cout, cout, 3, 3}, rng);
  for (int64_t i = 0; i < w2.numel(); ++i) w2.ptr()[i] *= 0.1f;
  pm.create(base + ".conv2.w", w2);
  pm.create(base + ".conv2.b", Tensor::zeros({cout}));
  if (cin != cout) {
    pm.create(base + ".skip.w", init::conv_weight({cout, cin, 1, 1}, rng));
    pm.create(base + ".skip.b", Tensor::zeros({cout}));
  }
}

inline void create_attnblock(ParamMap& pm, const std::string& base, int64_t c,
                             int64_t model_dim, Rng& rng) {
  pm.create(base + ".norm.g", Tensor::ones({c}));
  pm.create(base + ".norm.b", Tensor::zeros({c}));
  pm.create(base + ".qkv.w", init::linear_weight(c, 3 * c, rng));
  pm.create(base + ".qkv.b", Tensor::zeros({3 * c}));
  auto pw = init::linear_weight(c, c, rng);
  for (int64_t i = 0; i < pw.numel(); ++i) pw.ptr()[i] *= 0.1f;
  pm.create(base + ".proj.w", pw);
  pm.create(base + ".proj.b", Tensor::zeros({c}));
  pm.create(base + ".xnorm.g", Tensor::ones({c}));
  pm.create(base + ".xnorm.b", Tensor::zeros({c}));
  pm.create(base + ".q.w", init::linear_weight(c, c, rng));
  pm.create(base + ".q.b", Tensor::zeros({c}));
  pm.create(base + ".kv.w", init::linear_weight(model_dim, 2 * c, rng));
  pm.create(base + ".kv.b", Tensor::zeros({2 * c}));
  auto xw = init::linear_weight(c, c, rng);
  for (int64_t i = 0; i < xw.numel(); ++i) xw.ptr()[i] *= 0.1f;
  pm.create(base + ".xproj.w", xw);
  pm.create(base + ".xproj.b", Tensor::zeros({c}));
}

template <typename T>
TensorT<T> resblock(const ParamMapT<T>& p, const std::string& base,
                    const TensorT<T>& x, const TensorT<T>& time_vec,
                    int64_t groups, const ForwardCtx& ctx) {
  int64_t b = x.dim(0);
  int64_t cout = p.at(base + ".conv1.b").numel();
  auto h = silu(group_norm(x, groups, p.at(base + ".norm1.g"),
                           p.at(base + ".norm1.b")));
  h = conv2d(h, p.at(base + ".conv1.w"), p.at(base + ".conv1.b"));
  auto tv = reshape(time_vec, {1, time_vec.numel()});
  auto ss = linear(silu(tv), p.at(base + ".temb.w"), p.at(base + ".temb.b"));
  auto scale = slice(ss, 1, 0, cout);
  auto shift = slice(ss, 1, cout, cout);
  if (b > 1) {
    scale = expand(scale, 0, b);
    shift = expand(shift, 0, b);
  }
  h = film(group_norm(h, groups, p.at(base + ".norm2.g"),
                      p.at(base + ".norm2.b")),
           scale, shift);
  h = silu(h);
  if (ctx.active()) {
    auto m = TensorT<T>::zeros(h.shape());
    T keep = static_cast<T>(1.0 - ctx.dropout_p);
    T inv = T(1) / keep;
    for (int64_t i = 0; i < m.numel(); ++i)
      m.ptr()[i] = ctx.dropout_rng->uniform() >= ctx.dropout_p ? inv : T(0);
    h = mul(h, m);
  }
  h = conv2d(h, p.at(base + ".conv2.w"), p.at(base + ".conv2.b"));
  TensorT<T> sk = x;
  if (p.contains(base + ".skip.w"))
    sk = conv2d(x, p.at(base + ".skip.w"), p.at(base + ".skip.b"),
                /*stride=*/1, /*pad=*/0);
  return add(sk, h);
}

// [B,C,H,W] -> [B*HW, C] token rows and back.
template <typename T>
TensorT<T> to_rows(const TensorT<T>& x) {
  int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return reshape(transpose_last2(reshape(x, {b, c, hw})), {b * hw, c});
}

template <typename T>
TensorT<T> from_rows(const TensorT<T>& rows, int64_t b, int64_t c, int64_t h,
                     int64_t w) {
  return reshape(transpose_last2(reshape(rows, {b, h * w, c})), {b, c, h, w});
}

// [B*L, C] -> [B, heads, L, dh]
template <typename T>
TensorT<T> split_heads(const TensorT<T>& rows, int64_t b, int64_t l,
                       int64_t heads, int64_t dh) {
  return transpose_axes(reshape(rows, {b, l, heads, dh}), 1, 2);
}

template <typename T>
TensorT<T> merge_heads(const TensorT<T>& x) {
  int64_t b = x.dim(0), heads = x.dim(1), l = x.dim(2), dh = x.dim(3);
  return reshape(transpose_axes(x, 1, 2), {b * l, heads * dh});
}

template <typename T>
TensorT<T> attnblock(const ParamMapT<T>& p, const std::string& base,
                     const TensorT<T>& x, const TensorT<T>& tokens,
                     const std::vector<uint8_t>& token_mask, int64_t groups,
                     int64_t head_channels, const ForwardCtx& ctx) {
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t heads = c / head_channels, hw = h * w;

  // Self-attention over spatial positions.
  auto rows = to_rows(
      group_norm(x, groups, p.at(base + ".norm.g"), p.at(base + ".norm.b")));
  auto qkv = linear(rows, p.at(base + ".qkv.w"), p.at(base + ".qkv.b"));
  auto q = split_heads(slice(qkv, 1, 0, c), b, hw, heads, head_channels);
  auto k = split_heads(slice(qkv, 1, c, c), b, hw, heads, head_channels);
  auto v = split_heads(slice(qkv, 1, 2 * c, c), b, hw, heads, head_channels);
  auto att = merge_heads(attention(q, k, v));
  att = linear(att, p.at(base + ".proj.w"), p.at(base + ".proj.b"));
  auto out = add(x, from_rows(att, b, c, h, w));

  // Cross-attention over the global context tokens.
  int64_t l = tokens.dim(0);
  auto xrows = to_rows(group_norm(out, groups, p.at(base + ".xnorm.g"),
                                  p.at(base + ".xnorm.b")));
  auto xq = split_heads(linear(xrows, p.at(base + ".q.w"), p.at(base + ".q.b")),
                        b, hw, heads, head_channels);
  auto kv = linear(tokens, p.at(base + ".kv.w"), p.at(base + ".kv.b"));
  auto xk = split_heads(slice(kv, 1, 0, c), 1, l, heads, head_channels);
  auto xv = split_heads(slice(kv, 1, c, c), 1, l, heads, head_channels);
  if (b > 1) {
    xk = expand(xk, 0, b);
    xv = expand(xv, 0, b);
  }
  AttnMask mask = AttnMask::none();
  bool any_masked = false;
  for (uint8_t m : token_mask) any_masked = any_masked || m == 0;
  if (any_masked) {
    std::vector<uint8_t> bits(static_cast<size_t>(hw * l));
    for (int64_t qi = 0; qi < hw; ++qi)
      for (int64_t ki = 0; ki < l; ++ki)
        bits[static_cast<size_t>(qi * l + ki)] =
            token_mask[static_cast<size_t>(ki)];
    mask = AttnMask::qk(std::move(bits), hw, l);
  }
  auto xatt = merge_heads(attention(xq, xk, xv, mask));
  xatt = linear(xatt, p.at(base + ".xproj.w"), p.at(base + ".xproj.b"));
  if (ctx.active()) {
    auto m = TensorT<T>::zeros(xatt.shape());
    T keep = static_cast<T>(1.0 - ctx.dropout_p);
    T inv = T(1) / keep;
    for (int64_t i = 0; i < m.numel(); ++i)
      m.ptr()[i] = ctx.dropout_rng->uniform() >= ctx.dropout_p ? inv : T(0);
    xatt = mul(xatt, m);
  }
  return add(out, from_rows(xatt, b, c, h, w));
}

template <typename T>
void check_stage(const TensorT<T>& h, const char* stage) {
  if (!all_finite(h))
    throw NumericError(std::string("unet: non-finite activation after ") +
                       stage);
}

}  // namespace detail_unet

// Creates all denoiser parameters (conditioning + UNet) with a single seeded
// rng; creation order is fixed so the same seed always yields the same init.
inline ParamMap init_denoiser_params(const UNetConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamMap pm;
  Rng rng(seed);
  init_conditioning_params(pm, cfg.model_dim, cfg.local_channels, rng);

  using detail_unet::create_attnblock;
  using detail_unet::create_resblock;
  using detail_unet::lvl;

  pm.create("unet.time.l1.w",
            init::linear_weight(cfg.model_dim, cfg.model_dim, rng));
  pm.create("unet.time.l1.b", Tensor::zeros({cfg.model_dim}));
  pm.create("unet.time.l2.w",
            init::linear_weight(cfg.model_dim, cfg.model_dim, rng));
  pm.create("unet.time.l2.b", Tensor::zeros({cfg.model_dim}));

  int64_t in_ch = 3 + cfg.local_channels;
  if (cfg.channel_mults.empty()) {
    // Degenerate zero-level config: stem + head only.
    pm.create("unet.stem.w",
              init::conv_weight({cfg.base_channels, in_ch, 3, 3}, rng));
    pm.create("unet.stem.b", Tensor::zeros({cfg.base_channels}));
    pm.create("unet.head.norm.g", Tensor::ones({cfg.base_channels}));
    pm.create("unet.head.norm.b", Tensor::zeros({cfg.base_channels}));
    pm.create("unet.head.conv.w", Tensor::zeros({3, cfg.base_channels, 3, 3}));
    pm.create("unet.head.conv.b", Tensor::zeros({3}));
    return pm;
  }

  auto ch_at = [&](int64_t l) {
    return cfg.base_channels * cfg.channel_mults[static_cast<size_t>(l)];
  };
  int64_t c0 = ch_at(0);
  pm.create("unet.stem.w", init::conv_weight({c0, in_ch, 3, 3}, rng));
  pm.create("unet.stem.b", Tensor::zeros({c0}));

  std::vector<int64_t> skip_ch{c0};
  int64_t cur = c0;
  for (int64_t l = 0; l < cfg.levels(); ++l) {
    int64_t cl = ch_at(l);
    for (int64_t i = 0; i < cfg.blocks_per_level; ++i) {
      std::string base = lvl("down", l) + ".b" + std::to_string(i);
      create_resblock(pm, base, cur, cl, cfg.model_dim, rng);
      if (cfg.has_attention(l))
        create_attnblock(pm, base + ".attn", cl, cfg.model_dim, rng);
      cur = cl;
      skip_ch.push_back(cur);
    }
    if (l < cfg.levels() - 1) {
      pm.create(lvl("down", l) + ".down.w",
                init::conv_weight({cl, cl, 3, 3}, rng));
      pm.create(lvl("down", l) + ".down.b", Tensor::zeros({cl}));
      skip_ch.push_back(cl);
    }
  }

  create_resblock(pm, "unet.mid.b0", cur, cur, cfg.model_dim, rng);
  create_attnblock(pm, "unet.mid.attn", cur, cfg.model_dim, rng);
  create_resblock(pm, "unet.mid.b1", cur, cur, cfg.model_dim, rng);

  for (int64_t l = cfg.levels() - 1; l >= 0; --l) {
    int64_t cl = ch_at(l);
    for (int64_t i = 0; i <= cfg.blocks_per_level; ++i) {
      std::string base = lvl("up", l) + ".b" + std::to_string(i);
      create_resblock(pm, base, cur + skip_ch.back(), cl, cfg.model_dim, rng);
      skip_ch.pop_back();
      if (cfg.has_attention(l))
        create_attnblock(pm, base + ".attn", cl, cfg.model_dim, rng);
      cur = cl;
    }
    if (l > 0) {
      pm.create(lvl("up", l) + ".up.w", init::conv_weight({cl, cl, 3, 3}, rng));
      pm.create(lvl("up", l) + ".up.b", Tensor::zeros({cl}));
    }
  }

  pm.create("unet.head.norm.g", Tensor::ones({c0}));
  pm.create("unet.head.norm.b", Tensor::zeros({c0}));
  pm.create("unet.head.conv.w", Tensor::zeros({3, c0, 3, 3}));
  pm.create("unet.head.conv.b", Tensor::zeros({3}));
  return pm;
}

// Exact learnable-scalar count for a config (derived from the same builder
// that creates the parameters, so it can never drift from reality).
inline int64_t param_count(const UNetConfig& cfg) {
  return init_denoiser_params(cfg, 0).scalar_count();
}

// The denoiser epsilon-prediction: fuses localized conditions into the input,
// injects global conditions through the time vector and cross-attention
// tokens, runs the UNet. x_t is [B,3,H,W]; the bundle/mask pair is shared
// across the batch. Deterministic given inputs (and ctx).
template <typename T>
TensorT<T> denoise(const ParamMapT<T>& params, const UNetConfig& cfg,
                   const TensorT<T>& x_t, int64_t t, const BundleT<T>& bundle,
                   const DropoutMask& mask, const ForwardCtx& ctx = {},
                   bool hard_mask_tokens = false) {
  using namespace detail_unet;
  if (x_t.rank() != 4 || x_t.dim(1) != 3)
    throw ShapeError("denoise: x_t must be [B,3,H,W]");
  if (x_t.dim(2) != cfg.image_size || x_t.dim(3) != cfg.image_size)
    throw ShapeError("denoise: spatial size mismatches config");

  auto t_emb = timestep_embedding<T>(t, cfg.model_dim);
  auto global = build_global(params, bundle, mask, t_emb, hard_mask_tokens);
  auto tv = reshape(global.time_vec, {1, cfg.model_dim});
  tv = linear(silu(linear(tv, params.at("unet.time.l1.w"),
                          params.at("unet.time.l1.b"))),
              params.at("unet.time.l2.w"), params.at("unet.time.l2.b"));
  auto time_vec = reshape(tv, {cfg.model_dim});

  auto local = build_local(params, bundle, mask);
  auto x = fuse_input(x_t, local, cfg.local_channels);
  auto h = conv2d(x, params.at("unet.stem.w"), params.at("unet.stem.b"));
  check_stage(h, "stem");

  if (cfg.channel_mults.empty()) {
    h = silu(group_norm(h, cfg.norm_groups, params.at("unet.head.norm.g"),
                        params.at("unet.head.norm.b")));
    h = conv2d(h, params.at("unet.head.conv.w"), params.at("unet.head.conv.b"));
    check_stage(h, "head");
    return h;
  }

  std::vector<TensorT<T>> hs{h};
  for (int64_t l = 0; l < cfg.levels(); ++l) {
    for (int64_t i = 0; i < cfg.blocks_per_level; ++i) {
      std::string base = lvl("down", l) + ".b" + std::to_string(i);
      h = resblock(params, base, h, time_vec, cfg.norm_groups, ctx);
      if (cfg.has_attention(l))
        h = attnblock(params, base + ".attn", h, global.tokens,
                      global.token_mask, cfg.norm_groups, cfg.head_channels,
                      ctx);
      hs.push_back(h);
    }
    if (l < cfg.levels() - 1) {
      h = conv2d(h, params.at(lvl("down", l) + ".down.w"),
                 params.at(lvl("down", l) + ".down.b"), /*stride=*/2);
      hs.push_back(h);
    }
    check_stage(h, ("down level " + std::to_string(l)).c_str());
  }

  h = resblock(params, "unet.mid.b0", h, time_vec, cfg.norm_groups, ctx);
  h = attnblock(params, "unet.mid.attn", h, global.tokens, global.token_mask,
                cfg.norm_groups, cfg.head_channels, ctx);
  h = resblock(params, "unet.mid.b1", h, time_vec, cfg.norm_groups, ctx);
  check_stage(h, "middle");

  for (int64_t l = cfg.levels() - 1; l >= 0; --l) {
    for (int64_t i = 0; i <= cfg.blocks_per_level; ++i) {
      std::string base = lvl("up", l) + ".b" + std::to_string(i);
      h = resblock(params, base,
                   concat(std::vector<TensorT<T>>{h, hs.back()}, 1), time_vec,
                   cfg.norm_groups, ctx);
      hs.pop_back();
      if (cfg.has_attention(l))
        h = attnblock(params, base + ".attn", h, global.tokens,
                      global.token_mask, cfg.norm_groups, cfg.head_channels,
                      ctx);
    }
    if (l > 0) {
      h = conv2d(upsample_nearest2x(h), params.at(lvl("up", l) + ".up.w"),
                 params.at(lvl("up", l) + ".up.b"));
    }
    check_stage(h, ("up level " + std::to_string(l)).c_str());
  }

  h = silu(group_norm(h, cfg.norm_groups, params.at("unet.head.norm.g"),
                      params.at("unet.head.norm.b")));
  h = conv2d(h, params.at("unet.head.conv.w"), params.at("unet.head.conv.b"));
  check_stage(h, "head");
  return h;
}

// Adapts the shared-bundle denoiser to the sampler's per-row-bundle calling
// convention: rows with equal bundles are evaluated together.
template <typename T>
BatchDenoiseFn<T> make_batch_denoiser(const ParamMapT<T>& params,
                                      const UNetConfig& cfg) {
  return [&params, cfg](const TensorT<T>& x, int64_t t,
                        const std::vector<BundleT<T>>& bundles) -> TensorT<T> {
    int64_t b = x.dim(0);
    if (b != static_cast<int64_t>(bundles.size()))
      throw ShapeError("batch denoiser: bundle count mismatches batch");
    NoGradGuard ng;
    // Group rows by bundle equality, preserving evaluation determinism.
    std::vector<int64_t> group(static_cast<size_t>(b), -1);
    auto out = TensorT<T>::zeros(x.shape());
    Shape row_shape(x.shape().begin() + 1, x.shape().end());
    int64_t row_numel = 1;
    for (int64_t d : row_shape) row_numel *= d;
    for (int64_t i = 0; i < b; ++i) {
      if (group[static_cast<size_t>(i)] >= 0) continue;
      std::vector<int64_t> rows{i};
      for (int64_t j = i + 1; j < b; ++j)
        if (group[static_cast<size_t>(j)] < 0 &&
            bundle_equal(bundles[static_cast<size_t>(i)],
                         bundles[static_cast<size_t>(j)]))
          rows.push_back(j);
      for (int64_t r : rows) group[static_cast<size_t>(r)] = i;

      auto xs = TensorT<T>::zeros(
          Shape{static_cast<int64_t>(rows.size()), row_shape[0], row_shape[1],
                row_shape[2]});
      for (size_t r = 0; r < rows.size(); ++r)
        std::copy_n(x.ptr() + rows[r] * row_numel, row_numel,
                    xs.ptr() + static_cast<int64_t>(r) * row_numel);
      auto eps = denoise(params, cfg, xs, t, bundles[static_cast<size_t>(i)],
                         DropoutMask::all());
      for (size_t r = 0; r < rows.size(); ++r)
        std::copy_n(eps.ptr() + static_cast<int64_t>(r) * row_numel, row_numel,
                    out.ptr() + rows[r] * row_numel);
    }
    return out;
  };
}

}  // namespace composer
