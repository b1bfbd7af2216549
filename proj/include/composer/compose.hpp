#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "composer/checkpoint.hpp"
#include "composer/color.hpp"
#include "composer/conditioning.hpp"
#include "composer/decompose.hpp"
#include "composer/diffusion.hpp"
#include "composer/errors.hpp"
#include "composer/image.hpp"
#include "composer/schedule.hpp"
#include "composer/trainer.hpp"
#include "composer/unet.hpp"

namespace composer {

// Rec. 601 luma weights: the deterministic inference-time grayscale. (The
// trainer samples random gray weights as an augmentation; extraction for
// editing must be reproducible, so it is pinned.)
inline constexpr std::array<double, 3> kStandardGray{0.299, 0.587, 0.114};

// A checkpoint readied for generation: one immutable weight set (EMA by
// default) with its schedule and a batched denoiser. Copies share the
// underlying parameters, so a loaded model is concurrently usable.
class Sampler {
 public:
  Sampler(ParamMap params, UNetConfig ucfg, NoiseSchedule sched)
      : params_(std::make_shared<ParamMap>(std::move(params))),
        ucfg_(ucfg),
        sched_(std::move(sched)),
        fn_(make_batch_denoiser(*params_, ucfg_)) {}

  const BatchDenoiseFn<float>& fn() const { return fn_; }
  const UNetConfig& config() const { return ucfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const ParamMap& params() const { return *params_; }
  Shape sample_shape() const {
    return {3, ucfg_.image_size, ucfg_.image_size};
  }

 private:
  std::shared_ptr<ParamMap> params_;
  UNetConfig ucfg_;
  NoiseSchedule sched_;
  BatchDenoiseFn<float> fn_;
};

inline Sampler make_sampler(const Checkpoint& ck, bool use_ema = true) {
  UNetConfig ucfg = decode_unet_config(ck.config);
  TrainConfig tcfg = decode_train_config(ck.config);
  return Sampler(param_clone(use_ema ? ck.ema : ck.live), ucfg,
                 make_schedule(tcfg.schedule, tcfg.diffusion_steps));
}

// ---------------------------------------------------------------------------
// Cross-source bundle assembly.

// A condition source: a bare image exposes the image-derived slots
// (semantic, palette, sketch, intensity, masked); a dataset record
// additionally exposes caption, depth, and instances.
struct Source {
  DatasetRecord record;      // image always valid, [3,H,W] in [0,1]
  bool has_truth = false;    // depth/instances are ground truth
  bool has_caption = false;  // caption tokens meaningful
};

inline Source image_source(Tensor image) {
  Source s;
  s.record.image = std::move(image);
  return s;
}

inline Source record_source(DatasetRecord rec) {
  return Source{std::move(rec), true, true};
}

// Slots to take from one source. The masked slot additionally needs the
// editable-region mask ([1,H,W] binary).
struct SlotRequest {
  Source source;
  std::vector<Slot> slots;
  std::optional<Tensor> mask;
};

// Deterministic inference-time extraction of a single slot.
inline void extract_slot(Bundle& out, const Source& src, Slot s,
                         const std::optional<Tensor>& mask) {
  const Tensor& img = src.record.image;
  switch (s) {
    case Slot::kCaption:
      if (!src.has_caption)
        throw ContractError("assemble_bundle: source has no caption");
      out.caption = src.record.caption;
      break;
    case Slot::kSemantic:
      out.semantic = semantic_embed(img);
      break;
    case Slot::kPalette:
      out.palette = color_histogram(img);
      break;
    case Slot::kSketch:
      out.sketch = sketch(img);
      break;
    case Slot::kInstances:
      if (!src.has_truth)
        throw ContractError("assemble_bundle: source has no instance map");
      out.instances = src.record.instances.clone();
      break;
    case Slot::kDepth:
      if (!src.has_truth)
        throw ContractError("assemble_bundle: source has no depth map");
      out.depth = src.record.depth.clone();
      break;
    case Slot::kIntensity:
      out.intensity = to_model_range(grayscale(img, kStandardGray));
      break;
    case Slot::kMasked:
      if (!mask)
        throw ContractError("assemble_bundle: masked slot needs a mask");
      out.masked = make_masked(img, *mask);
      break;
  }
}

// Merges slots from several sources into one condition set. Each slot may be
// requested at most once across all sources; unrequested slots stay absent.
inline Bundle assemble_bundle(const std::vector<SlotRequest>& requests) {
  Bundle out;
  for (const auto& r : requests) {
    for (Slot s : r.slots) {
      if (out.has(s))
        throw ContractError(std::string("assemble_bundle: slot requested "
                                        "twice: ") +
                            slot_name(s));
      extract_slot(out, r.source, s, r.mask);
    }
  }
  out.validate();
  return out;
}

// All slots extractable from a source without extra inputs.
inline std::vector<Slot> extractable_slots(const Source& src) {
  std::vector<Slot> slots{Slot::kSemantic, Slot::kPalette, Slot::kSketch,
                          Slot::kIntensity};
  if (src.has_caption) slots.insert(slots.begin(), Slot::kCaption);
  if (src.has_truth) {
    slots.push_back(Slot::kInstances);
    slots.push_back(Slot::kDepth);
  }
  return slots;
}

// ---------------------------------------------------------------------------
// Task operations. Images cross these boundaries in [0,1]; sampling happens
// in the model's [-1,1] range internally.

// Wraps the denoiser so every evaluation applies classifier-free guidance at
// the given weight. At omega = 1 this is the raw conditional model.
inline BatchDenoiseFn<float> guided_fn(const Sampler& s, double omega) {
  if (omega == 1.0) return s.fn();
  return [fn = s.fn(), omega](const Tensor& x, int64_t t,
                              const std::vector<Bundle>& bundles) {
    std::vector<GuidanceSpec> specs;
    specs.reserve(bundles.size());
    for (const Bundle& b : bundles)
      specs.push_back({Bundle::empty(), b, omega});
    return set_guidance_batch(fn, x, t, specs);
  };
}

// Guided DDIM generation from seeded noise.
inline Tensor generate(const Sampler& s, const Bundle& cond, double omega,
                       int64_t steps, uint64_t seed) {
  GuidanceSpec spec{Bundle::empty(), cond, omega};
  auto out = sample_loop_batch(s.fn(), std::vector<GuidanceSpec>{spec},
                               s.schedule(), steps, seed, s.sample_shape());
  return to_unit_range(reshape(out, s.sample_shape()));
}

// Batched form: one guided sample per condition set, split seeds.
inline Tensor generate_batch(const Sampler& s, const std::vector<Bundle>& conds,
                             double omega, int64_t steps, uint64_t seed) {
  std::vector<GuidanceSpec> specs;
  specs.reserve(conds.size());
  for (const Bundle& c : conds) specs.push_back({Bundle::empty(), c, omega});
  auto out =
      sample_loop_batch(s.fn(), specs, s.schedule(), steps, seed,
                        s.sample_shape());
  return to_unit_range(out);
}

// Generation conditioned on a subset of a decomposition. An empty subset is
// an unconditional sample.
inline Tensor variations(const Sampler& s, const Bundle& decomposition,
                         const std::vector<Slot>& subset, double omega,
                         int64_t steps, uint64_t seed) {
  return generate(s, decomposition.restricted_to(subset), omega, steps, seed);
}

// Unit-sphere geodesic blend; falls back to chordal blending near parallel
// endpoints and rejects antipodal ones (no unique geodesic).
inline Tensor slerp_unit(const Tensor& a, const Tensor& b, double lam) {
  if (a.numel() != b.numel())
    throw ShapeError("slerp_unit: dimension mismatch");
  double dot = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    dot += double(a.ptr()[i]) * double(b.ptr()[i]);
  dot = std::clamp(dot, -1.0, 1.0);
  double theta = std::acos(dot);
  double wa, wb;
  if (std::sin(theta) < 1e-6) {
    wa = 1.0 - lam;
    wb = lam;
  } else {
    wa = std::sin((1.0 - lam) * theta) / std::sin(theta);
    wb = std::sin(lam * theta) / std::sin(theta);
  }
  auto out = add(mul_scalar(a, float(wa)), mul_scalar(b, float(wb)));
  double n2 = 0;
  for (float v : out.data()) n2 += double(v) * v;
  if (n2 < 1e-12)
    throw SingularityError("slerp_unit: antipodal endpoints at the midpoint");
  return mul_scalar(out, float(1.0 / std::sqrt(n2)));
}

// Convex histogram blend, renormalized against fp drift.
inline Tensor lerp_palette(const Tensor& a, const Tensor& b, double lam) {
  if (a.numel() != b.numel())
    throw ShapeError("lerp_palette: dimension mismatch");
  auto out = add(mul_scalar(a, float(1.0 - lam)), mul_scalar(b, float(lam)));
  double sum = 0;
  for (float v : out.data()) sum += double(v);
  if (sum <= 0) throw NumericError("lerp_palette: blended mass is zero");
  return mul_scalar(out, float(1.0 / sum));
}

namespace detail_compose {

// Sentence embedding of a bundle's caption slot: token mean, a precomputed
// mix, or the learned null when the slot is empty.
inline Tensor bundle_sentence(const ParamMap& params, const Bundle& b) {
  if (b.sentence_mix) return b.sentence_mix->clone();
  return caption_embed(params, b.caption ? *b.caption : std::vector<int>{})
      .sentence.clone();
}

}  // namespace detail_compose

// Embedding-space traversal between two decompositions: the global slots
// (semantic: spherical; palette: linear; caption: linear sentence-embedding
// mix) blend at lambda, slots named in `kept` are pinned to A, and all other
// slots stay absent. A global slot absent from one side blends against the
// model's learned null representation. Endpoints reduce to plain conditional
// generation from the corresponding source.
inline Tensor interpolate(const Sampler& s, const Bundle& a, const Bundle& b,
                          const std::vector<Slot>& kept, double lam,
                          double omega, int64_t steps, uint64_t seed) {
  if (!(lam >= 0.0 && lam <= 1.0))
    throw ContractError("interpolate: lambda outside [0,1]");
  const std::vector<Slot> globals{Slot::kCaption, Slot::kSemantic,
                                  Slot::kPalette};
  Bundle cond;
  if (lam == 0.0) {
    std::vector<Slot> keep = kept;
    keep.insert(keep.end(), globals.begin(), globals.end());
    cond = a.restricted_to(keep);
  } else if (lam == 1.0 && kept.empty()) {
    cond = b.restricted_to(globals);
  } else {
    cond = a.restricted_to(kept);
    const ParamMap& pm = s.params();
    if (!cond.has(Slot::kSemantic) && (a.semantic || b.semantic)) {
      const Tensor& va = a.semantic ? *a.semantic
                                    : pm.at("cond.semantic.null");
      const Tensor& vb = b.semantic ? *b.semantic
                                    : pm.at("cond.semantic.null");
      cond.semantic = slerp_unit(va, vb, lam);
    }
    if (!cond.has(Slot::kPalette) && (a.palette || b.palette)) {
      const Tensor& va = a.palette ? *a.palette : pm.at("cond.palette.null");
      const Tensor& vb = b.palette ? *b.palette : pm.at("cond.palette.null");
      cond.palette = lerp_palette(va, vb, lam);
    }
    if (!cond.has(Slot::kCaption) &&
        (a.has(Slot::kCaption) || b.has(Slot::kCaption))) {
      auto sa = detail_compose::bundle_sentence(pm, a);
      auto sb = detail_compose::bundle_sentence(pm, b);
      cond.sentence_mix =
          add(mul_scalar(sa, float(1.0 - lam)), mul_scalar(sb, float(lam)));
    }
  }
  return generate(s, cond, omega, steps, seed);
}

// Deterministic inversion of an image to its x_T latent under a condition
// set (pure conditional unless omega is overridden).
inline Tensor invert(const Sampler& s, const Tensor& image_unit,
                     const Bundle& cond, int64_t steps, double omega = 1.0) {
  auto x0 = to_model_range(image_unit);
  Shape batched = x0.shape();
  batched.insert(batched.begin(), 1);
  auto xt = invert_loop_batch(guided_fn(s, omega),
                              std::vector<Bundle>{cond},
                              reshape(x0, batched), s.schedule(), steps);
  return reshape(xt, x0.shape());
}

// Samples down the same step grid starting from a given latent.
inline Tensor sample_from_latent(const Sampler& s, const Tensor& latent,
                                 const Bundle& cond, int64_t steps,
                                 double omega = 1.0) {
  Shape batched = latent.shape();
  batched.insert(batched.begin(), 1);
  GuidanceSpec spec{Bundle::empty(), cond, omega};
  auto out = sample_loop_from(s.fn(), std::vector<GuidanceSpec>{spec},
                              s.schedule(), steps,
                              reshape(latent.clone(), batched));
  return to_unit_range(reshape(out, latent.shape()));
}

// Bidirectional edit: invert under c_i, resample under c_j on the same step
// grid. Both legs default to the raw conditional model (omega = 1); guidance
// during editing is available but degrades inversion fidelity.
inline Tensor reconfigure(const Sampler& s, const Tensor& image_unit,
                          const Bundle& ci, const Bundle& cj, int64_t steps,
                          double omega_invert = 1.0,
                          double omega_sample = 1.0) {
  auto latent = invert(s, image_unit, ci, steps, omega_invert);
  return sample_from_latent(s, latent, cj, steps, omega_sample);
}

// Masked generation with a hard outside-region guarantee: the bundle gains
// the masked-image slot, the sample is composited so that every pixel
// outside the editable region is bitwise the input's.
inline Tensor region_edit(const Sampler& s, const Tensor& image_unit,
                          const Tensor& mask, Bundle bundle, double omega,
                          int64_t steps, uint64_t seed) {
  if (mask.rank() != 3 || mask.dim(0) != 1 ||
      mask.dim(1) != image_unit.dim(1) || mask.dim(2) != image_unit.dim(2))
    throw ShapeError("region_edit: mask must be [1,H,W] matching the image");
  for (float v : mask.data())
    if (v != 0.f && v != 1.f)
      throw ContractError("region_edit: mask must be binary");
  bundle.masked = make_masked(image_unit, mask);
  auto sample = generate(s, bundle, omega, steps, seed);
  Tensor out = image_unit.clone();
  int64_t hw = image_unit.dim(1) * image_unit.dim(2);
  for (int64_t p = 0; p < hw; ++p) {
    if (mask.ptr()[p] != 1.f) continue;
    for (int64_t c = 0; c < 3; ++c)
      out.ptr()[c * hw + p] = sample.ptr()[c * hw + p];
  }
  return out;
}

// Palette recoloring via reconfiguration: invert under the image's own
// decomposition, resample with the palette slot swapped. Deterministic (no
// seed enters).
inline Tensor colorize(const Sampler& s, const Tensor& image_unit,
                       const Bundle& decomposition, const Tensor& palette,
                       int64_t steps) {
  Bundle cj = decomposition;
  cj.palette = palette.clone();
  cj.validate();
  return reconfigure(s, image_unit, decomposition, cj, steps);
}

// Direct colorization: a fresh sample conditioned on the image's grayscale
// plus the target palette.
inline Tensor colorize_direct(const Sampler& s, const Tensor& image_unit,
                              const Tensor& palette, double omega,
                              int64_t steps, uint64_t seed) {
  Bundle b;
  b.intensity = to_model_range(grayscale(image_unit, kStandardGray));
  b.palette = palette.clone();
  b.validate();
  return generate(s, b, omega, steps, seed);
}

}  // namespace composer
