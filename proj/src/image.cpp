#include "composer/image.hpp"

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "composer/errors.hpp"

namespace composer {

namespace {

// Reads one whitespace-delimited PPM header token, skipping '#' comments.
std::string next_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw CorruptionError("ppm: truncated header");
  return tok;
}

}  // namespace

Tensor load_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path.string());
  if (next_token(is) != "P6") throw CorruptionError("ppm: not a P6 file");
  int64_t w = std::stoll(next_token(is));
  int64_t h = std::stoll(next_token(is));
  int64_t maxval = std::stoll(next_token(is));
  if (w <= 0 || h <= 0) throw CorruptionError("ppm: bad dimensions");
  if (maxval != 255) throw CorruptionError("ppm: only maxval 255 supported");
  std::vector<unsigned char> raw(static_cast<size_t>(3 * w * h));
  is.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (!is) throw CorruptionError("ppm: truncated payload");
  std::vector<float> data(static_cast<size_t>(3 * h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        data[static_cast<size_t>((c * h + y) * w + x)] =
            static_cast<float>(raw[static_cast<size_t>((y * w + x) * 3 + c)]) /
            255.f;
  return Tensor::from({3, h, w}, std::move(data));
}

void save_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("save_ppm: image must be [3,H,W]");
  int64_t h = image.dim(1), w = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(static_cast<size_t>(3 * w * h));
  const float* p = image.ptr();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        float v = p[(c * h + y) * w + x];
        v = std::min(1.f, std::max(0.f, v));
        raw[static_cast<size_t>((y * w + x) * 3 + c)] =
            static_cast<unsigned char>(std::lround(v * 255.f));
      }
  os.write(reinterpret_cast<const char*>(raw.data()),
           static_cast<std::streamsize>(raw.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor to_model_range(const Tensor& unit) {
  return add_scalar(mul_scalar(unit, 2.f), -1.f);
}

Tensor to_unit_range(const Tensor& model) {
  return mul_scalar(add_scalar(model, 1.f), 0.5f);
}

double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shape mismatch");
  double mse = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a.ptr()[i]) - b.ptr()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace composer
