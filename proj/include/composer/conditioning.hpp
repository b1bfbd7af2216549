#pragma once

#include <array>
#include <string>
#include <vector>

#include "composer/bundle.hpp"
#include "composer/errors.hpp"
#include "composer/params.hpp"
#include "composer/rng.hpp"
#include "composer/tensor.hpp"
#include "composer/vocab.hpp"

namespace composer {

inline constexpr int64_t kWordDim = 64;       // learned word-embedding width
inline constexpr int64_t kCondTokens = 8;     // extra tokens per global slot

// Per-condition keep flags, in Slot order:
// [caption, semantic, palette, sketch, instances, depth, intensity, masked].
struct DropoutMask {
  std::array<bool, kNumSlots> keep{};

  static DropoutMask all() {
    DropoutMask m;
    m.keep.fill(true);
    return m;
  }
  static DropoutMask none() { return {}; }

  bool kept(Slot s) const { return keep[static_cast<size_t>(s)]; }
  DropoutMask& set(Slot s, bool v) {
    keep[static_cast<size_t>(s)] = v;
    return *this;
  }
};

// Three-way mode draw: p=0.1 drop everything, p=0.1 keep everything,
// otherwise one independent draw per condition in Slot order with drop
// probability 0.5 (0.7 for intensity). Marginal keep probabilities:
// intensity 0.1 + 0.8*0.3 = 0.34, every other slot 0.1 + 0.8*0.5 = 0.50.
inline DropoutMask sample_dropout(Rng& rng) {
  double mode = rng.uniform();
  if (mode < 0.1) return DropoutMask::none();
  if (mode < 0.2) return DropoutMask::all();
  DropoutMask m;
  for (Slot s : all_slots()) {
    double drop_p = s == Slot::kIntensity ? 0.7 : 0.5;
    m.set(s, rng.uniform() >= drop_p);
  }
  return m;
}

// Creates every conditioning parameter in a fixed rng-draw order.
inline void init_conditioning_params(ParamMap& pm, int64_t model_dim,
                                     int64_t local_channels, Rng& rng) {
  auto table = Tensor::randn({kVocabSize, kWordDim}, rng);
  for (int64_t i = 0; i < table.numel(); ++i)
    table.ptr()[i] *= 1.0f / std::sqrt(static_cast<float>(kWordDim));
  pm.create("cond.word_table", table);
  pm.create("cond.word.proj.w", init::linear_weight(kWordDim, model_dim, rng));
  pm.create("cond.word.proj.b", Tensor::zeros({model_dim}));
  auto sent_null = Tensor::randn({kWordDim}, rng);
  for (int64_t i = 0; i < sent_null.numel(); ++i)
    sent_null.ptr()[i] *= 1.0f / std::sqrt(static_cast<float>(kWordDim));
  pm.create("cond.sent.null", sent_null);
  pm.create("cond.sent.proj.w", init::linear_weight(kWordDim, model_dim, rng));
  pm.create("cond.sent.proj.b", Tensor::zeros({model_dim}));
  auto sem_null = Tensor::randn({kSemanticDim}, rng);
  {
    float n2 = 0;
    for (int64_t i = 0; i < sem_null.numel(); ++i)
      n2 += sem_null.ptr()[i] * sem_null.ptr()[i];
    float inv = 1.0f / std::max(std::sqrt(n2), 1e-12f);
    for (int64_t i = 0; i < sem_null.numel(); ++i) sem_null.ptr()[i] *= inv;
  }
  pm.create("cond.semantic.null", sem_null);
  pm.create("cond.semantic.proj.w",
            init::linear_weight(kSemanticDim, model_dim, rng));
  pm.create("cond.semantic.proj.b", Tensor::zeros({model_dim}));
  pm.create("cond.semantic.tok.w",
            init::linear_weight(kSemanticDim, kCondTokens * model_dim, rng));
  pm.create("cond.semantic.tok.b", Tensor::zeros({kCondTokens * model_dim}));
  pm.create("cond.palette.null",
            Tensor::full({kPaletteBins},
                         1.0f / static_cast<float>(kPaletteBins)));
  pm.create("cond.palette.proj.w",
            init::linear_weight(kPaletteBins, model_dim, rng));
  pm.create("cond.palette.proj.b", Tensor::zeros({model_dim}));
  pm.create("cond.palette.tok.w",
            init::linear_weight(kPaletteBins, kCondTokens * model_dim, rng));
  pm.create("cond.palette.tok.b", Tensor::zeros({kCondTokens * model_dim}));

  const std::array<std::pair<const char*, int64_t>, 5> locals = {{
      {"sketch", 1}, {"instances", 4}, {"depth", 1}, {"intensity", 1},
      {"masked", 4},
  }};
  for (auto& [name, cin] : locals) {
    std::string base = std::string("cond.local.") + name;
    pm.create(base + ".c1.w",
              init::conv_weight({local_channels, cin, 3, 3}, rng));
    pm.create(base + ".c1.b", Tensor::zeros({local_channels}));
    pm.create(base + ".c2.w",
              init::conv_weight({local_channels, local_channels, 3, 3}, rng));
    pm.create(base + ".c2.b", Tensor::zeros({local_channels}));
  }
}

template <typename T>
struct CaptionEmbT {
  TensorT<T> words;     // [L, kWordDim]; undefined when has_words = false
  bool has_words = false;
  TensorT<T> sentence;  // [kWordDim]
};

// Word embeddings from the learned table; sentence = mean of word rows.
// Empty captions embed to the learned null sentence with no word rows.
template <typename T>
CaptionEmbT<T> caption_embed(const ParamMapT<T>& params,
                             const std::vector<int>& tokens) {
  CaptionEmbT<T> out;
  for (int id : tokens)
    if (id < 0 || id >= kVocabSize)
      throw VocabError("caption_embed: token id " + std::to_string(id) +
                       " outside the vocabulary");
  if (tokens.empty()) {
    out.sentence = params.at("cond.sent.null");
    return out;
  }
  out.words = gather_rows(params.at("cond.word_table"), tokens);
  out.has_words = true;
  int64_t l = static_cast<int64_t>(tokens.size());
  auto avg = TensorT<T>::full({1, l}, T(1) / static_cast<T>(l));
  out.sentence = reshape(matmul(avg, out.words), {kWordDim});
  return out;
}

template <typename T>
struct GlobalContextT {
  TensorT<T> time_vec;             // [model_dim]
  TensorT<T> tokens;               // [L_words + 16, model_dim]
  std::vector<uint8_t> token_mask; // 1 = attend
};

using GlobalContext = GlobalContextT<float>;

namespace detail_cond {

template <typename T>
TensorT<T> proj_vec(const ParamMapT<T>& p, const std::string& base,
                    const TensorT<T>& v) {
  auto row = reshape(v, {1, v.numel()});
  return reshape(linear(row, p.at(base + ".w"), p.at(base + ".b")),
                 {p.at(base + ".b").numel()});
}

}  // namespace detail_cond

// Global conditioning: sentence/semantic/palette projections added onto the
// timestep embedding, plus a context token matrix of caption words followed
// by 8 semantic and 8 palette tokens. A condition that is dropped by the
// mask or absent from the bundle takes the same single code path: its
// learned null representation. A dropped/absent caption contributes no word
// rows (matching deletion) and the null sentence in the additive path. With
// hard_mask_tokens, dropped global slots are excluded via the attention mask
// instead of contributing null-derived tokens.
template <typename T>
GlobalContextT<T> build_global(const ParamMapT<T>& params,
                               const BundleT<T>& bundle,
                               const DropoutMask& mask,
                               const TensorT<T>& t_emb,
                               bool hard_mask_tokens = false) {
  if (t_emb.rank() != 1)
    throw ShapeError("build_global: t_emb must be rank 1");
  int64_t d = t_emb.numel();
  if (params.at("cond.sent.proj.b").numel() != d)
    throw ContractError("build_global: t_emb dim mismatches projections");

  bool cap_on = mask.kept(Slot::kCaption) && bundle.caption.has_value();
  bool mix_on = mask.kept(Slot::kCaption) && bundle.sentence_mix.has_value();
  bool sem_on = mask.kept(Slot::kSemantic) && bundle.semantic.has_value();
  bool pal_on = mask.kept(Slot::kPalette) && bundle.palette.has_value();

  CaptionEmbT<T> cap = caption_embed(
      params, cap_on ? *bundle.caption : std::vector<int>{});
  if (mix_on) {
    if (bundle.sentence_mix->numel() != kWordDim)
      throw ShapeError("build_global: sentence_mix must have word dim");
    cap.sentence = *bundle.sentence_mix;
    cap.has_words = false;
  }
  TensorT<T> sem = sem_on ? *bundle.semantic : params.at("cond.semantic.null");
  TensorT<T> pal = pal_on ? *bundle.palette : params.at("cond.palette.null");
  if (sem.numel() != kSemanticDim)
    throw ShapeError("build_global: semantic must have dim 64");
  if (pal.numel() != kPaletteBins)
    throw ShapeError("build_global: palette must have 275 bins");

  auto time_vec =
      add(add(t_emb, detail_cond::proj_vec(params, "cond.sent.proj",
                                           cap.sentence)),
          add(detail_cond::proj_vec(params, "cond.semantic.proj", sem),
              detail_cond::proj_vec(params, "cond.palette.proj", pal)));

  auto sem_tok = reshape(
      detail_cond::proj_vec(params, "cond.semantic.tok", sem), {kCondTokens, d});
  auto pal_tok = reshape(
      detail_cond::proj_vec(params, "cond.palette.tok", pal), {kCondTokens, d});

  std::vector<TensorT<T>> parts;
  int64_t l_words = 0;
  if (cap.has_words) {
    l_words = cap.words.dim(0);
    parts.push_back(
        linear(cap.words, params.at("cond.word.proj.w"),
               params.at("cond.word.proj.b")));
  }
  parts.push_back(sem_tok);
  parts.push_back(pal_tok);

  GlobalContextT<T> out;
  out.time_vec = time_vec;
  out.tokens = parts.size() == 1 ? parts[0] : concat(parts, 0);
  out.token_mask.assign(static_cast<size_t>(l_words + 2 * kCondTokens), 1);
  if (hard_mask_tokens) {
    for (int64_t i = 0; i < kCondTokens; ++i) {
      if (!sem_on) out.token_mask[static_cast<size_t>(l_words + i)] = 0;
      if (!pal_on)
        out.token_mask[static_cast<size_t>(l_words + kCondTokens + i)] = 0;
    }
  }
  return out;
}

template <typename T>
struct LocalStackT {
  TensorT<T> fused;  // [1, E, H, W]; undefined when none contributed
  bool any = false;
};

using LocalStack = LocalStackT<float>;

// Localized conditioning: each present-and-kept map goes through its own
// two-conv stack to E channels; contributions are summed. Dropped or absent
// conditions contribute exactly zero (they are simply skipped), which is
// what makes condition sets composable: build_local(A ∪ B) = build_local(A)
// + build_local(B) for disjoint sets.
template <typename T>
LocalStackT<T> build_local(const ParamMapT<T>& params,
                           const BundleT<T>& bundle, const DropoutMask& mask) {
  const std::array<std::pair<Slot, const char*>, 5> locals = {{
      {Slot::kSketch, "sketch"},
      {Slot::kInstances, "instances"},
      {Slot::kDepth, "depth"},
      {Slot::kIntensity, "intensity"},
      {Slot::kMasked, "masked"},
  }};
  LocalStackT<T> out;
  int64_t h = -1, w = -1;
  for (auto& [slot, name] : locals) {
    if (!mask.kept(slot) || !bundle.has(slot)) continue;
    const TensorT<T>& x = *bundle.map_slot(slot);
    if (x.rank() != 3)
      throw ShapeError(std::string("build_local: ") + name + " must be 3-D");
    if (h < 0) {
      h = x.dim(1);
      w = x.dim(2);
    } else if (x.dim(1) != h || x.dim(2) != w) {
      throw ContractError(std::string("build_local: ") + name +
                          " spatial size mismatches other conditions");
    }
    std::string base = std::string("cond.local.") + name;
    auto y = reshape(x, {1, x.dim(0), h, w});
    y = silu(conv2d(y, params.at(base + ".c1.w"), params.at(base + ".c1.b")));
    y = conv2d(y, params.at(base + ".c2.w"), params.at(base + ".c2.b"));
    out.fused = out.any ? add(out.fused, y) : y;
    out.any = true;
  }
  return out;
}

// Channel concatenation [B,3,H,W] + [B,E,H,W] -> [B,3+E,H,W]; an absent
// stack contributes zeros so the unconditional path is well-defined.
template <typename T>
TensorT<T> fuse_input(const TensorT<T>& x_t, const LocalStackT<T>& stack,
                      int64_t local_channels) {
  if (x_t.rank() != 4) throw ShapeError("fuse_input: x_t must be [B,C,H,W]");
  if (local_channels == 0) return x_t;
  int64_t b = x_t.dim(0), h = x_t.dim(2), w = x_t.dim(3);
  TensorT<T> f;
  if (stack.any) {
    if (stack.fused.dim(1) != local_channels)
      throw ShapeError("fuse_input: stack channel mismatch");
    if (stack.fused.dim(2) != h || stack.fused.dim(3) != w)
      throw ShapeError("fuse_input: stack spatial mismatch");
    f = b == 1 ? stack.fused : expand(stack.fused, 0, b);
  } else {
    f = TensorT<T>::zeros({b, local_channels, h, w});
  }
  return concat(std::vector<TensorT<T>>{x_t, f}, 1);
}

}  // namespace composer
