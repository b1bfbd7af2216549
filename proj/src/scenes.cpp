#include "composer/scenes.hpp"

#include <cmath>

#include "composer/errors.hpp"
#include "composer/vocab.hpp"

namespace composer {

const char* shape_class_name(ShapeClass c) {
  switch (c) {
    case ShapeClass::kCircle: return "circle";
    case ShapeClass::kSquare: return "square";
    case ShapeClass::kTriangle: return "triangle";
  }
  return "?";
}

const std::array<NamedColor, 8> kColorSet = {{
    {"red", 0.90f, 0.10f, 0.10f},
    {"green", 0.10f, 0.75f, 0.15f},
    {"blue", 0.15f, 0.25f, 0.90f},
    {"yellow", 0.95f, 0.85f, 0.10f},
    {"orange", 0.95f, 0.55f, 0.10f},
    {"purple", 0.60f, 0.15f, 0.80f},
    {"cyan", 0.10f, 0.80f, 0.85f},
    {"pink", 0.95f, 0.55f, 0.75f},
}};

namespace {

bool inside_shape(const ShapeSpec& s, double x, double y) {
  double half = s.size / 2.0;
  switch (s.cls) {
    case ShapeClass::kCircle: {
      double dx = x - s.cx, dy = y - s.cy;
      return dx * dx + dy * dy <= half * half;
    }
    case ShapeClass::kSquare:
      return std::abs(x - s.cx) <= half && std::abs(y - s.cy) <= half;
    case ShapeClass::kTriangle: {
      // Upward triangle: apex (cx, cy-half), base corners (cx+-half, cy+half).
      double ax = s.cx, ay = s.cy - half;
      double bx = s.cx - half, by = s.cy + half;
      double cx = s.cx + half, cy = s.cy + half;
      auto side = [](double px, double py, double qx, double qy, double rx,
                     double ry) {
        return (qx - px) * (ry - py) - (qy - py) * (rx - px);
      };
      double d1 = side(ax, ay, bx, by, x, y);
      double d2 = side(bx, by, cx, cy, x, y);
      double d3 = side(cx, cy, ax, ay, x, y);
      bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
      bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
      return !(has_neg && has_pos);
    }
  }
  return false;
}

}  // namespace

void render_shape(Tensor& image, Tensor& depth, Tensor& instances,
                  const ShapeSpec& spec) {
  int64_t h = image.dim(1), w = image.dim(2);
  double half = spec.size / 2.0;
  if (spec.size < 1.0) throw ContractError("render_shape: degenerate size");
  if (spec.cx - half < 0 || spec.cx + half > static_cast<double>(w) ||
      spec.cy - half < 0 || spec.cy + half > static_cast<double>(h))
    throw ContractError("render_shape: shape exceeds canvas bounds");
  if (spec.depth <= 0 || spec.depth > 1)
    throw ContractError("render_shape: depth outside (0,1]");
  if (spec.color < 0 || spec.color >= static_cast<int>(kColorSet.size()))
    throw ContractError("render_shape: color index out of range");

  int64_t x0 = static_cast<int64_t>(std::floor(spec.cx - half));
  int64_t x1 = static_cast<int64_t>(std::ceil(spec.cx + half));
  int64_t y0 = static_cast<int64_t>(std::floor(spec.cy - half));
  int64_t y1 = static_cast<int64_t>(std::ceil(spec.cy + half));
  x0 = std::max<int64_t>(0, x0);
  y0 = std::max<int64_t>(0, y0);
  x1 = std::min(w, x1 + 1);
  y1 = std::min(h, y1 + 1);

  const NamedColor& col = kColorSet[static_cast<size_t>(spec.color)];
  float rgb[3] = {col.r, col.g, col.b};
  int64_t hw = h * w;
  int chan = static_cast<int>(spec.cls) + 1;

  for (int64_t y = y0; y < y1; ++y) {
    for (int64_t x = x0; x < x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx)
          if (inside_shape(spec, static_cast<double>(x) + (sx + 0.5) / 4.0,
                           static_cast<double>(y) + (sy + 0.5) / 4.0))
            ++hits;
      if (hits == 0) continue;
      float cov = static_cast<float>(hits) / 16.f;
      int64_t p = y * w + x;
      for (int c = 0; c < 3; ++c)
        image.ptr()[c * hw + p] =
            cov * rgb[c] + (1.f - cov) * image.ptr()[c * hw + p];
      if (cov >= 0.5f) {
        depth.ptr()[p] = static_cast<float>(spec.depth);
        for (int c = 0; c < kInstanceChannels; ++c)
          instances.ptr()[c * hw + p] = (c == chan) ? 1.f : 0.f;
      }
    }
  }
}

DatasetRecord gen_scene(uint64_t seed) {
  Rng rng(splitmix64(seed ^ 0x9E3779B97F4A7C15ull));
  DatasetRecord rec;
  rec.seed = seed;
  int64_t n = kImageSize, hw = n * n;
  rec.image = Tensor::zeros({3, n, n});
  rec.depth = Tensor::zeros({1, n, n});
  rec.instances = Tensor::zeros({kInstanceChannels, n, n});
  for (int64_t p = 0; p < hw; ++p) rec.instances.ptr()[p] = 1.f;  // background

  float top[3], bottom[3];
  for (int c = 0; c < 3; ++c) top[c] = static_cast<float>(rng.uniform());
  for (int c = 0; c < 3; ++c) bottom[c] = static_cast<float>(rng.uniform());
  for (int64_t y = 0; y < n; ++y) {
    float t = static_cast<float>(y) / static_cast<float>(n - 1);
    for (int c = 0; c < 3; ++c) {
      float v = (1.f - t) * top[c] + t * bottom[c];
      for (int64_t x = 0; x < n; ++x) rec.image.ptr()[c * hw + y * n + x] = v;
    }
  }

  int count = static_cast<int>(rng.uniform_int(1, 4));
  for (int i = 0; i < count; ++i) {
    ShapeSpec s;
    s.cls = static_cast<ShapeClass>(rng.uniform_int(0, 2));
    s.color = static_cast<int>(rng.uniform_int(0, 7));
    s.size = 8.0 + rng.uniform() * 16.0;
    double half = s.size / 2.0;
    s.cx = half + rng.uniform() * (static_cast<double>(n) - s.size);
    s.cy = half + rng.uniform() * (static_cast<double>(n) - s.size);
    s.depth = static_cast<double>(i + 1) / static_cast<double>(count + 1);
    rec.shapes.push_back(s);
  }
  // Painter order: farthest (smallest depth) first; draw order is already
  // depth order by construction.
  for (const ShapeSpec& s : rec.shapes)
    render_shape(rec.image, rec.depth, rec.instances, s);

  // Caption lists visible shapes only, so its class set always matches the
  // nonempty instance channels even when a shape ends up fully occluded.
  rec.caption_text.clear();
  bool first = true;
  for (const ShapeSpec& s : rec.shapes) {
    bool visible = false;
    int chan = static_cast<int>(s.cls) + 1;
    for (int64_t p = 0; p < hw && !visible; ++p)
      visible = rec.instances.ptr()[chan * hw + p] == 1.f &&
                rec.depth.ptr()[p] == static_cast<float>(s.depth);
    if (!visible) continue;
    if (!first) rec.caption_text += " and ";
    first = false;
    rec.caption_text += "a ";
    rec.caption_text += kColorSet[static_cast<size_t>(s.color)].name;
    rec.caption_text += " ";
    rec.caption_text += shape_class_name(s.cls);
  }
  rec.caption = tokenize(rec.caption_text);
  return rec;
}

void DatasetRecord::validate() const {
  if (image.shape() != Shape{3, kImageSize, kImageSize} ||
      depth.shape() != Shape{1, kImageSize, kImageSize} ||
      instances.shape() != Shape{kInstanceChannels, kImageSize, kImageSize})
    throw ContractError("record: bad tensor shapes");
  int64_t hw = kImageSize * kImageSize;
  for (int64_t p = 0; p < hw; ++p) {
    float sum = 0;
    int owner = -1;
    for (int c = 0; c < kInstanceChannels; ++c) {
      float v = instances.ptr()[c * hw + p];
      if (v != 0.f && v != 1.f) throw ContractError("record: non-binary instance");
      if (v == 1.f) owner = c;
      sum += v;
    }
    if (sum != 1.f) throw ContractError("record: instance channels not one-hot");
    float d = depth.ptr()[p];
    if (d < 0.f || d > 1.f) throw ContractError("record: depth outside [0,1]");
    if (owner == 0 && d != 0.f)
      throw ContractError("record: background depth nonzero");
    if (owner > 0 && !shapes.empty()) {
      // The owning pixel's depth must equal some shape of that class's depth.
      bool ok = false;
      for (const ShapeSpec& s : shapes)
        ok = ok || (static_cast<int>(s.cls) + 1 == owner &&
                    static_cast<float>(s.depth) == d);
      if (!ok) throw ContractError("record: depth/instance inconsistency");
    }
  }
  // The remaining checks compare against the generation metadata; records
  // loaded back from disk carry tensors and caption only.
  if (shapes.empty()) return;
  // Caption <-> instances: caption class tokens equal nonempty channels, and
  // color words equal the visible shapes' colors.
  std::array<bool, kNumShapeClasses> visible_class{};
  std::array<bool, 8> visible_color{};
  for (const ShapeSpec& s : shapes) {
    int chan = static_cast<int>(s.cls) + 1;
    for (int64_t p = 0; p < hw; ++p)
      if (instances.ptr()[chan * hw + p] == 1.f &&
          depth.ptr()[p] == static_cast<float>(s.depth)) {
        visible_class[static_cast<size_t>(s.cls)] = true;
        visible_color[static_cast<size_t>(s.color)] = true;
        break;
      }
  }
  for (int cls = 0; cls < kNumShapeClasses; ++cls) {
    int tok = token_id(shape_class_name(static_cast<ShapeClass>(cls)));
    bool in_caption = false;
    for (int t : caption) in_caption = in_caption || t == tok;
    bool any_pixel = false;
    for (int64_t p = 0; p < hw; ++p)
      any_pixel = any_pixel || instances.ptr()[(cls + 1) * hw + p] == 1.f;
    if (in_caption != any_pixel)
      throw ContractError("record: caption/instance class mismatch");
    if (in_caption != visible_class[static_cast<size_t>(cls)])
      throw ContractError("record: caption/visibility class mismatch");
  }
  for (size_t ci = 0; ci < kColorSet.size(); ++ci) {
    int tok = token_id(kColorSet[ci].name);
    bool in_caption = false;
    for (int t : caption) in_caption = in_caption || t == tok;
    if (in_caption != visible_color[ci])
      throw ContractError("record: caption/color mismatch");
  }
}

}  // namespace composer
