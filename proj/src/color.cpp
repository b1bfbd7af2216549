#include "composer/color.hpp"

#include <cmath>
#include <vector>

#include "composer/errors.hpp"

namespace composer {

namespace {

double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double lab_f(double t) {
  constexpr double kDelta3 = (6.0 / 29.0) * (6.0 / 29.0) * (6.0 / 29.0);
  constexpr double kScale = (29.0 / 6.0) * (29.0 / 6.0) / 3.0;
  return t > kDelta3 ? std::cbrt(t) : kScale * t + 4.0 / 29.0;
}

}  // namespace

Lab rgb_to_lab(double r, double g, double b) {
  if (r < 0 || r > 1 || g < 0 || g > 1 || b < 0 || b > 1)
    throw ContractError("rgb_to_lab: input outside [0,1]");
  double rl = srgb_to_linear(r);
  double gl = srgb_to_linear(g);
  double bl = srgb_to_linear(b);
  double x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
  double y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
  double z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
  double fx = lab_f(x / 0.95047);
  double fy = lab_f(y / 1.0);
  double fz = lab_f(z / 1.08883);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

// 99th-percentile CIELab chroma over the 512-scene pilot corpus (seeds
// 0..511, 2,097,152 pixels); frozen for reproducibility.
const double kChromaNorm = 103.336067;

BinCoord palette_bin(const Lab& lab) {
  double hue_deg = std::atan2(lab.b, lab.a) * (180.0 / M_PI);
  if (hue_deg < 0) hue_deg += 360.0;
  int hue = static_cast<int>(hue_deg / (360.0 / kHueBins));
  if (hue >= kHueBins) hue = kHueBins - 1;

  double chroma = std::sqrt(lab.a * lab.a + lab.b * lab.b);
  double sat = chroma / kChromaNorm;
  int satb = static_cast<int>(sat * kSatBins);
  if (satb >= kSatBins) satb = kSatBins - 1;

  double light = lab.l / 100.0;
  int lightb = static_cast<int>(light * kLightBins);
  if (lightb >= kLightBins) lightb = kLightBins - 1;
  if (lightb < 0) lightb = 0;
  return {hue, satb, lightb};
}

Tensor color_histogram(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("color_histogram: image must be [3,H,W]");
  int64_t hw = image.dim(1) * image.dim(2);
  if (hw == 0) throw ContractError("color_histogram: empty image");

  double counts[kHueBins][kSatBins][kLightBins] = {};
  const float* p = image.ptr();
  for (int64_t i = 0; i < hw; ++i) {
    Lab lab = rgb_to_lab(p[i], p[hw + i], p[2 * hw + i]);
    BinCoord c = palette_bin(lab);
    counts[c.hue][c.sat][c.light] += 1.0;
  }

  // Per-axis sigma in bin units: sigma_bins = 10 / bin width, where widths
  // are 360/11 hue degrees, kChromaNorm/5 chroma units, 20 L units.
  double sig_h = kSmoothingSigma / (360.0 / kHueBins);
  double sig_s = kSmoothingSigma / (kChromaNorm / kSatBins);
  double sig_l = kSmoothingSigma / (100.0 / kLightBins);
  auto gauss = [](double d, double sig) {
    return std::exp(-(d * d) / (2.0 * sig * sig));
  };

  // Separable smoothing: circular over hue, clamped over sat/light.
  double tmp1[kHueBins][kSatBins][kLightBins] = {};
  for (int i = 0; i < kHueBins; ++i)
    for (int d = -(kHueBins / 2); d <= kHueBins / 2; ++d) {
      int src = ((i + d) % kHueBins + kHueBins) % kHueBins;
      double w = gauss(d, sig_h);
      for (int j = 0; j < kSatBins; ++j)
        for (int k = 0; k < kLightBins; ++k)
          tmp1[i][j][k] += w * counts[src][j][k];
    }
  double tmp2[kHueBins][kSatBins][kLightBins] = {};
  for (int j = 0; j < kSatBins; ++j)
    for (int js = 0; js < kSatBins; ++js) {
      double w = gauss(j - js, sig_s);
      for (int i = 0; i < kHueBins; ++i)
        for (int k = 0; k < kLightBins; ++k)
          tmp2[i][j][k] += w * tmp1[i][js][k];
    }
  double out[kHueBins][kSatBins][kLightBins] = {};
  double total = 0.0;
  for (int k = 0; k < kLightBins; ++k)
    for (int ks = 0; ks < kLightBins; ++ks) {
      double w = gauss(k - ks, sig_l);
      for (int i = 0; i < kHueBins; ++i)
        for (int j = 0; j < kSatBins; ++j) out[i][j][k] += w * tmp2[i][j][ks];
    }
  for (int i = 0; i < kHueBins; ++i)
    for (int j = 0; j < kSatBins; ++j)
      for (int k = 0; k < kLightBins; ++k) total += out[i][j][k];

  std::vector<float> bins(kHueBins * kSatBins * kLightBins);
  for (int i = 0; i < kHueBins; ++i)
    for (int j = 0; j < kSatBins; ++j)
      for (int k = 0; k < kLightBins; ++k)
        bins[static_cast<size_t>((i * kSatBins + j) * kLightBins + k)] =
            static_cast<float>(out[i][j][k] / total);
  return Tensor::from({kHueBins * kSatBins * kLightBins}, std::move(bins));
}

Tensor grayscale(const Tensor& image, const std::array<double, 3>& weights) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("grayscale: image must be [3,H,W]");
  double sum = weights[0] + weights[1] + weights[2];
  if (weights[0] < 0 || weights[1] < 0 || weights[2] < 0 ||
      std::abs(sum - 1.0) > 1e-6)
    throw ContractError("grayscale: weights must be non-negative and sum to 1");
  int64_t hw = image.dim(1) * image.dim(2);
  std::vector<float> out(static_cast<size_t>(hw));
  const float* p = image.ptr();
  for (int64_t i = 0; i < hw; ++i)
    out[static_cast<size_t>(i)] =
        static_cast<float>(weights[0] * p[i] + weights[1] * p[hw + i] +
                           weights[2] * p[2 * hw + i]);
  return Tensor::from({1, image.dim(1), image.dim(2)}, std::move(out));
}

const std::array<std::array<double, 3>, 8> kGrayWeightSet = {{
    {0.299, 0.587, 0.114},
    {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0},
    {1.0, 0.0, 0.0},
    {0.0, 1.0, 0.0},
    {0.0, 0.0, 1.0},
    {0.5, 0.5, 0.0},
    {0.0, 0.5, 0.5},
    {0.5, 0.0, 0.5},
}};

std::array<double, 3> sample_gray_weights(Rng& rng) {
  return kGrayWeightSet[static_cast<size_t>(rng.uniform_int(0, 7))];
}

}  // namespace composer
