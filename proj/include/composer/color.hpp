#pragma once

#include <array>

#include "composer/rng.hpp"
#include "composer/tensor.hpp"

namespace composer {

struct Lab {
  double l, a, b;
};

// sRGB in [0,1] -> CIELab (D65 white point), L in [0,100].
Lab rgb_to_lab(double r, double g, double b);

// Palette histogram geometry: 11 hue x 5 saturation x 5 light bins, flattened
// as ((hue * 5) + sat) * 5 + light.
inline constexpr int kHueBins = 11;
inline constexpr int kSatBins = 5;
inline constexpr int kLightBins = 5;

// Saturation = chroma / kChromaNorm (clamped to [0,1)); kChromaNorm is the
// 99th-percentile CIELab chroma over a 512-scene pilot corpus, frozen here.
extern const double kChromaNorm;

// Gaussian smoothing sigma, in CIELab units, applied per axis in bin units.
inline constexpr double kSmoothingSigma = 10.0;

struct BinCoord {
  int hue, sat, light;
};

// Maps a Lab color to its (hue, sat, light) bin.
BinCoord palette_bin(const Lab& lab);

// Smoothed, normalized 275-bin palette of a [3,H,W] image in [0,1].
Tensor color_histogram(const Tensor& image);

// Per-pixel dot product with non-negative weights summing to 1.
Tensor grayscale(const Tensor& image, const std::array<double, 3>& weights);

// The fixed set of predefined gray-weight triples.
extern const std::array<std::array<double, 3>, 8> kGrayWeightSet;

// Uniform draw from kGrayWeightSet.
std::array<double, 3> sample_gray_weights(Rng& rng);

}  // namespace composer
