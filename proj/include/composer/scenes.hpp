#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "composer/rng.hpp"
#include "composer/tensor.hpp"

namespace composer {

inline constexpr int64_t kImageSize = 64;
inline constexpr int kNumShapeClasses = 3;   // circle, square, triangle
inline constexpr int kInstanceChannels = 4;  // background + classes

enum class ShapeClass { kCircle = 0, kSquare = 1, kTriangle = 2 };

const char* shape_class_name(ShapeClass c);

// The named color set shapes draw from; names are caption tokens.
struct NamedColor {
  const char* name;
  float r, g, b;
};
extern const std::array<NamedColor, 8> kColorSet;

struct ShapeSpec {
  ShapeClass cls = ShapeClass::kCircle;
  int color = 0;        // index into kColorSet
  double cx = 0, cy = 0;
  double size = 0;      // bounding extent in pixels
  double depth = 0;     // (0,1]; larger = nearer
};

struct DatasetRecord {
  Tensor image;               // [3,64,64] in [0,1]
  std::vector<int> caption;   // token ids
  std::string caption_text;
  Tensor depth;               // [1,64,64] in [0,1]; background 0
  Tensor instances;           // [4,64,64] one-hot
  uint64_t seed = 0;
  std::vector<ShapeSpec> shapes;  // generation metadata, painter order

  void validate() const;
};

// Rasterizes one shape into the canvas channels: image gets 4x4-supersampled
// coverage blending; instance/depth ownership uses coverage >= 0.5.
void render_shape(Tensor& image, Tensor& depth, Tensor& instances,
                  const ShapeSpec& spec);

// Deterministic procedural scene: 2-color vertical gradient background plus
// 1-4 shapes in strict depth order, with exact ground truth and caption.
DatasetRecord gen_scene(uint64_t seed);

}  // namespace composer
