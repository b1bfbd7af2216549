#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "composer/errors.hpp"
#include "composer/tensor.hpp"

namespace composer {

// The eight condition representation slots.
enum class Slot {
  kCaption = 0,
  kSemantic,
  kPalette,
  kSketch,
  kInstances,
  kDepth,
  kIntensity,
  kMasked,
};

inline constexpr int kNumSlots = 8;
inline constexpr int kPaletteBins = 275;  // 11 hue x 5 saturation x 5 light
inline constexpr int kSemanticDim = 64;

inline constexpr std::array<Slot, kNumSlots> all_slots() {
  return {Slot::kCaption, Slot::kSemantic,  Slot::kPalette,
          Slot::kSketch,  Slot::kInstances, Slot::kDepth,
          Slot::kIntensity, Slot::kMasked};
}

inline const char* slot_name(Slot s) {
  switch (s) {
    case Slot::kCaption: return "caption";
    case Slot::kSemantic: return "semantic";
    case Slot::kPalette: return "palette";
    case Slot::kSketch: return "sketch";
    case Slot::kInstances: return "instances";
    case Slot::kDepth: return "depth";
    case Slot::kIntensity: return "intensity";
    case Slot::kMasked: return "masked";
  }
  return "?";
}

inline Slot parse_slot(const std::string& name) {
  for (Slot s : all_slots())
    if (name == slot_name(s)) return s;
  throw ContractError("unknown condition slot: " + name);
}

// The condition set c of the guidance equations: eight optional slots.
// Localized maps are [C x H x W]; caption is a token sequence embedded by the
// conditioning module's learned table.
template <typename T>
struct BundleT {
  std::optional<std::vector<int>> caption;
  std::optional<TensorT<T>> semantic;   // [64], unit norm
  std::optional<TensorT<T>> palette;    // [275], simplex
  std::optional<TensorT<T>> sketch;     // [1,H,W] in {0,1}
  std::optional<TensorT<T>> instances;  // [K,H,W] one-hot
  std::optional<TensorT<T>> depth;      // [1,H,W] in [0,1]
  std::optional<TensorT<T>> intensity;  // [1,H,W] in [-1,1]
  std::optional<TensorT<T>> masked;     // [4,H,W]: masked RGB + mask

  // Blended-caption override: a precomputed sentence embedding occupying the
  // caption slot (embedding-space interpolation has no token sequence). It
  // contributes the additive sentence path but no word cross-attn rows.
  // Mutually exclusive with `caption`.
  std::optional<TensorT<T>> sentence_mix;  // [word dim]

  static BundleT empty() { return {}; }

  bool has(Slot s) const {
    switch (s) {
      case Slot::kCaption:
        return caption.has_value() || sentence_mix.has_value();
      case Slot::kSemantic: return semantic.has_value();
      case Slot::kPalette: return palette.has_value();
      case Slot::kSketch: return sketch.has_value();
      case Slot::kInstances: return instances.has_value();
      case Slot::kDepth: return depth.has_value();
      case Slot::kIntensity: return intensity.has_value();
      case Slot::kMasked: return masked.has_value();
    }
    return false;
  }

  void drop(Slot s) {
    switch (s) {
      case Slot::kCaption:
        caption.reset();
        sentence_mix.reset();
        break;
      case Slot::kSemantic: semantic.reset(); break;
      case Slot::kPalette: palette.reset(); break;
      case Slot::kSketch: sketch.reset(); break;
      case Slot::kInstances: instances.reset(); break;
      case Slot::kDepth: depth.reset(); break;
      case Slot::kIntensity: intensity.reset(); break;
      case Slot::kMasked: masked.reset(); break;
    }
  }

  // Keeps only the named slots.
  BundleT restricted_to(const std::vector<Slot>& keep) const {
    BundleT out = *this;
    for (Slot s : all_slots()) {
      bool found = false;
      for (Slot k : keep) found = found || (k == s);
      if (!found) out.drop(s);
    }
    return out;
  }

  int present_count() const {
    int n = 0;
    for (Slot s : all_slots()) n += has(s) ? 1 : 0;
    return n;
  }

  const std::optional<TensorT<T>>& map_slot(Slot s) const {
    switch (s) {
      case Slot::kSemantic: return semantic;
      case Slot::kPalette: return palette;
      case Slot::kSketch: return sketch;
      case Slot::kInstances: return instances;
      case Slot::kDepth: return depth;
      case Slot::kIntensity: return intensity;
      case Slot::kMasked: return masked;
      default: throw ContractError("map_slot: caption is not a tensor slot");
    }
  }

  void validate() const {
    if (sentence_mix) {
      if (caption)
        throw ContractError("bundle: caption and sentence_mix are exclusive");
      for (T v : sentence_mix->data())
        if (!std::isfinite(static_cast<double>(v)))
          throw ContractError("bundle: non-finite sentence_mix");
    }
    if (palette) {
      if (palette->numel() != kPaletteBins)
        throw ContractError("bundle: palette must have 275 bins");
      double sum = 0;
      for (T v : palette->data()) {
        if (v < T(0)) throw ContractError("bundle: negative palette bin");
        sum += static_cast<double>(v);
      }
      if (std::abs(sum - 1.0) > 1e-5)
        throw ContractError("bundle: palette sums to " + std::to_string(sum));
    }
    if (semantic) {
      if (semantic->numel() != kSemanticDim)
        throw ContractError("bundle: semantic dim must be 64");
      double n2 = 0;
      for (T v : semantic->data()) n2 += static_cast<double>(v) * v;
      if (std::abs(std::sqrt(n2) - 1.0) > 1e-5)
        throw ContractError("bundle: semantic norm != 1");
    }
    if (sketch) {
      for (T v : sketch->data())
        if (v != T(0) && v != T(1))
          throw ContractError("bundle: sketch not binary");
    }
    if (instances) {
      if (instances->rank() != 3)
        throw ContractError("bundle: instances must be [K,H,W]");
      int64_t k = instances->dim(0), hw = instances->dim(1) * instances->dim(2);
      for (int64_t p = 0; p < hw; ++p) {
        T sum = T(0);
        for (int64_t c = 0; c < k; ++c) {
          T v = instances->ptr()[c * hw + p];
          if (v != T(0) && v != T(1))
            throw ContractError("bundle: instances not one-hot");
          sum += v;
        }
        if (sum != T(0) && sum != T(1))
          throw ContractError("bundle: instance channel sum not in {0,1}");
      }
    }
    if (depth) {
      for (T v : depth->data())
        if (v < T(0) || v > T(1))
          throw ContractError("bundle: depth outside [0,1]");
    }
    if (intensity) {
      for (T v : intensity->data())
        if (v < T(-1) || v > T(1))
          throw ContractError("bundle: intensity outside [-1,1]");
    }
    if (masked) {
      if (masked->rank() != 3 || masked->dim(0) != 4)
        throw ContractError("bundle: masked must be [4,H,W]");
      int64_t hw = masked->dim(1) * masked->dim(2);
      const T* p = masked->ptr();
      for (int64_t i = 0; i < hw; ++i) {
        T m = p[3 * hw + i];
        if (m != T(0) && m != T(1))
          throw ContractError("bundle: mask channel not binary");
        if (m == T(1))
          for (int64_t c = 0; c < 3; ++c)
            if (p[c * hw + i] != T(0))
              throw ContractError("bundle: masked RGB nonzero under mask");
      }
    }
  }
};

using Bundle = BundleT<float>;

template <typename T>
bool tensor_equal(const std::optional<TensorT<T>>& a,
                  const std::optional<TensorT<T>>& b) {
  if (a.has_value() != b.has_value()) return false;
  if (!a) return true;
  if (a->shape() != b->shape()) return false;
  return a->data() == b->data();
}

template <typename T>
bool bundle_equal(const BundleT<T>& a, const BundleT<T>& b) {
  if (a.caption.has_value() != b.caption.has_value()) return false;
  if (a.caption && *a.caption != *b.caption) return false;
  return tensor_equal(a.sentence_mix, b.sentence_mix) &&
         tensor_equal(a.semantic, b.semantic) &&
         tensor_equal(a.palette, b.palette) &&
         tensor_equal(a.sketch, b.sketch) &&
         tensor_equal(a.instances, b.instances) &&
         tensor_equal(a.depth, b.depth) &&
         tensor_equal(a.intensity, b.intensity) &&
         tensor_equal(a.masked, b.masked);
}

template <typename To, typename From>
BundleT<To> bundle_cast(const BundleT<From>& b) {
  BundleT<To> out;
  out.caption = b.caption;
  auto cv = [](const std::optional<TensorT<From>>& t)
      -> std::optional<TensorT<To>> {
    if (!t) return std::nullopt;
    return tensor_cast<To>(*t);
  };
  out.semantic = cv(b.semantic);
  out.palette = cv(b.palette);
  out.sketch = cv(b.sketch);
  out.instances = cv(b.instances);
  out.depth = cv(b.depth);
  out.intensity = cv(b.intensity);
  out.masked = cv(b.masked);
  out.sentence_mix = cv(b.sentence_mix);
  return out;
}

}  // namespace composer
