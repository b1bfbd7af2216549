#include "composer/decompose.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <utility>

#include "composer/color.hpp"
#include "composer/errors.hpp"
#include "composer/image.hpp"
#include "composer/serialize.hpp"

namespace composer {

namespace {

// Replicate-border pixel fetch for the Sobel window.
inline float at_clamped(const float* g, int64_t h, int64_t w, int64_t y,
                        int64_t x) {
  y = std::clamp<int64_t>(y, 0, h - 1);
  x = std::clamp<int64_t>(x, 0, w - 1);
  return g[y * w + x];
}

}  // namespace

Tensor sketch(const Tensor& image, double threshold_pct) {
  if (threshold_pct <= 0.0 || threshold_pct >= 100.0)
    throw ContractError("sketch: threshold percentile outside (0,100)");
  Tensor gray = grayscale(image, {0.299, 0.587, 0.114});
  int64_t h = gray.dim(1), w = gray.dim(2);
  const float* g = gray.ptr();

  std::vector<double> mag(static_cast<size_t>(h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double gx = 0, gy = 0;
      // Sobel taps; replicate border keeps constant regions gradient-free.
      const int sx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
      const int sy[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          double v = at_clamped(g, h, w, y + dy, x + dx);
          gx += sx[dy + 1][dx + 1] * v;
          gy += sy[dy + 1][dx + 1] * v;
        }
      mag[static_cast<size_t>(y * w + x)] = std::sqrt(gx * gx + gy * gy);
    }

  // Nearest-rank percentile; strict > so a constant image stays all-zero.
  // The cushion keeps float-ulp jitter inside a flat-gradient plateau (e.g.
  // the vertical background ramp) from straddling the threshold.
  std::vector<double> sorted = mag;
  std::sort(sorted.begin(), sorted.end());
  double thresh =
      sorted[static_cast<size_t>(threshold_pct / 100.0 *
                                 static_cast<double>(sorted.size() - 1))];
  double cut = thresh * (1.0 + 1e-5) + 1e-12;
  std::vector<uint8_t> edge(static_cast<size_t>(h * w), 0);
  for (size_t i = 0; i < edge.size(); ++i) edge[i] = mag[i] > cut ? 1 : 0;

  // One pass of Zhang-Suen-style thinning (first subiteration), applied
  // simultaneously: the sketch-simplification stand-in.
  auto nb = [&](int64_t y, int64_t x) -> uint8_t {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0;
    return edge[static_cast<size_t>(y * w + x)];
  };
  std::vector<uint8_t> keep = edge;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      if (!nb(y, x)) continue;
      uint8_t p2 = nb(y - 1, x), p3 = nb(y - 1, x + 1), p4 = nb(y, x + 1),
              p5 = nb(y + 1, x + 1), p6 = nb(y + 1, x), p7 = nb(y + 1, x - 1),
              p8 = nb(y, x - 1), p9 = nb(y - 1, x - 1);
      int b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
      uint8_t seq[9] = {p2, p3, p4, p5, p6, p7, p8, p9, p2};
      int a = 0;
      for (int i = 0; i < 8; ++i)
        if (seq[i] == 0 && seq[i + 1] == 1) ++a;
      if (b >= 2 && b <= 6 && a == 1 && p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0)
        keep[static_cast<size_t>(y * w + x)] = 0;
    }

  auto out = Tensor::zeros({1, h, w});
  for (int64_t i = 0; i < h * w; ++i)
    out.ptr()[i] = static_cast<float>(keep[static_cast<size_t>(i)]);
  return out;
}

namespace {

constexpr int kEncChannels[5] = {3, 16, 32, 64, 64};

const char* enc_param_name(int layer, bool weight) {
  static const char* names[8] = {"conv1_w", "conv1_b", "conv2_w", "conv2_b",
                                 "conv3_w", "conv3_b", "conv4_w", "conv4_b"};
  return names[2 * layer + (weight ? 0 : 1)];
}

struct SemanticWeights {
  std::vector<Tensor> w, b;
};

const SemanticWeights& semantic_weights() {
  static SemanticWeights cached = [] {
    SemanticWeights sw;
    auto dir = assets_dir() / "semantic";
    for (int l = 0; l < 4; ++l) {
      sw.w.push_back(load_ctsr(dir / (std::string(enc_param_name(l, true)) +
                                      ".ctsr")));
      sw.b.push_back(load_ctsr(dir / (std::string(enc_param_name(l, false)) +
                                      ".ctsr")));
      Shape want{kEncChannels[l + 1], kEncChannels[l], 3, 3};
      if (sw.w.back().shape() != want)
        throw CorruptionError("semantic encoder weight shape mismatch");
    }
    return sw;
  }();
  return cached;
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> init_semantic_weights() {
  Rng rng(0);
  std::vector<std::pair<std::string, Tensor>> params;
  for (int l = 0; l < 4; ++l) {
    int64_t ci = kEncChannels[l], co = kEncChannels[l + 1];
    auto w = Tensor::randn({co, ci, 3, 3}, rng);
    float scale = 1.0f / std::sqrt(static_cast<float>(ci * 9));
    float* p = w.ptr();
    for (int64_t oc = 0; oc < co; ++oc)
      for (int64_t icn = 0; icn < ci; ++icn) {
        float* k = p + (oc * ci + icn) * 9;
        float m = 0;
        for (int t = 0; t < 9; ++t) m += k[t];
        m /= 9.0f;
        // Mean-centered taps: flat color elicits no response, so the
        // embedding reacts to shape boundaries more than to fill color.
        for (int t = 0; t < 9; ++t) k[t] = (k[t] - m) * scale;
      }
    params.emplace_back(enc_param_name(l, true), w);
    params.emplace_back(enc_param_name(l, false), Tensor::zeros({co}));
  }
  return params;
}

void write_semantic_assets(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (auto& [name, t] : init_semantic_weights())
    save_ctsr(dir / (name + ".ctsr"), t);
}

Tensor semantic_embed(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("semantic_embed: expected [3,H,W]");
  NoGradGuard ng;
  const SemanticWeights& sw = semantic_weights();
  Tensor x = reshape(image, {1, 3, image.dim(1), image.dim(2)});
  for (int l = 0; l < 4; ++l)
    x = silu(conv2d(x, sw.w[static_cast<size_t>(l)],
                    sw.b[static_cast<size_t>(l)], /*stride=*/2, /*pad=*/1));
  int64_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto emb = Tensor::zeros({c});
  for (int64_t ch = 0; ch < c; ++ch) {
    double acc = 0;
    for (int64_t i = 0; i < hw; ++i) acc += x.ptr()[ch * hw + i];
    emb.ptr()[ch] = static_cast<float>(acc / static_cast<double>(hw));
  }
  double n2 = 0;
  for (int64_t i = 0; i < c; ++i)
    n2 += static_cast<double>(emb.ptr()[i]) * emb.ptr()[i];
  double inv = 1.0 / std::max(std::sqrt(n2), 1e-12);
  for (int64_t i = 0; i < c; ++i)
    emb.ptr()[i] = static_cast<float>(emb.ptr()[i] * inv);
  return emb;
}

Tensor make_masked(const Tensor& image, const Tensor& mask) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("make_masked: image must be [3,H,W]");
  int64_t h = image.dim(1), w = image.dim(2), hw = h * w;
  if (mask.shape() != Shape{1, h, w})
    throw ShapeError("make_masked: mask must be [1,H,W] matching the image");
  auto out = Tensor::zeros({4, h, w});
  const float* ip = image.ptr();
  const float* mp = mask.ptr();
  for (int64_t i = 0; i < hw; ++i) {
    float m = mp[i];
    if (m != 0.f && m != 1.f)
      throw ContractError("make_masked: mask must be binary");
    for (int64_t c = 0; c < 3; ++c)
      out.ptr()[c * hw + i] = m == 1.f ? 0.f : ip[c * hw + i];
    out.ptr()[3 * hw + i] = m;
  }
  return out;
}

Tensor random_rect_mask(int64_t h, int64_t w, Rng& rng) {
  // Area fraction drawn inside [0.11, 0.49] so that rounding the side
  // lengths keeps the realized fraction strictly within [0.10, 0.50].
  double frac = 0.11 + rng.uniform() * 0.38;
  double aspect = 0.5 + rng.uniform() * 1.5;
  double area = frac * static_cast<double>(h * w);
  int64_t rw = std::clamp<int64_t>(
      static_cast<int64_t>(std::lround(std::sqrt(area * aspect))), 1, w);
  int64_t rh = std::clamp<int64_t>(
      static_cast<int64_t>(std::lround(area / static_cast<double>(rw))), 1, h);
  int64_t x0 = rng.uniform_int(0, w - rw);
  int64_t y0 = rng.uniform_int(0, h - rh);
  auto mask = Tensor::zeros({1, h, w});
  for (int64_t y = y0; y < y0 + rh; ++y)
    for (int64_t x = x0; x < x0 + rw; ++x) mask.ptr()[y * w + x] = 1.f;
  return mask;
}

Bundle decompose_all(const DatasetRecord& record, Rng& rng) {
  Bundle b;
  b.caption = record.caption;
  b.semantic = semantic_embed(record.image);
  b.palette = color_histogram(record.image);
  b.sketch = sketch(record.image);
  b.instances = record.instances.clone();
  b.depth = record.depth.clone();
  b.intensity = to_model_range(grayscale(record.image, sample_gray_weights(rng)));
  b.masked = make_masked(record.image,
                         random_rect_mask(record.image.dim(1),
                                          record.image.dim(2), rng));
  b.validate();
  return b;
}

}  // namespace composer
