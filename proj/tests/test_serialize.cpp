#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <cmath>
#include <limits>

#include "composer/image.hpp"
#include "composer/rng.hpp"
#include "composer/serialize.hpp"

using namespace composer;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* stem) {
  return fs::temp_directory_path() / (std::string(stem) + "_" +
                                      std::to_string(::getpid()) + ".ctsr");
}

}  // namespace

TEST_CASE("ctsr header layout is exactly as documented") {
  auto t = Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5});
  std::ostringstream os(std::ios::binary);
  write_ctsr(os, t);
  std::string bytes = os.str();
  // 4 magic + 1 version + 1 dtype + 4 rank + 2*4 extents + 24 payload
  REQUIRE(bytes.size() == 4 + 1 + 1 + 4 + 8 + 24);
  CHECK(bytes.substr(0, 4) == "CTSR");
  CHECK(bytes[4] == 1);  // version
  CHECK(bytes[5] == 0);  // dtype f32
  CHECK(static_cast<unsigned char>(bytes[6]) == 2);  // rank, little-endian
  CHECK(bytes[7] == 0);
  CHECK(static_cast<unsigned char>(bytes[10]) == 2);  // extent 0
  CHECK(static_cast<unsigned char>(bytes[14]) == 3);  // extent 1
  float v;
  std::memcpy(&v, bytes.data() + 18 + 4, 4);
  CHECK(v == 1.f);  // row-major payload
}

TEST_CASE("ctsr round trip is bit-exact") {
  Rng rng(41);
  auto t = Tensor::randn({3, 5, 7}, rng);
  t.ptr()[0] = -0.f;  // sign of zero must survive
  auto path = temp_file("roundtrip");
  save_ctsr(path, t);
  auto u = load_ctsr(path);
  REQUIRE(u.shape() == t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) {
    uint32_t a, b;
    std::memcpy(&a, t.ptr() + i, 4);
    std::memcpy(&b, u.ptr() + i, 4);
    CHECK(a == b);
  }
  fs::remove(path);
}

TEST_CASE("ctsr rejects corruption") {
  auto t = Tensor::from({4}, {1, 2, 3, 4});
  std::ostringstream os(std::ios::binary);
  write_ctsr(os, t);
  std::string good = os.str();

  {
    std::string bad = good;
    bad[0] = 'X';
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_ctsr(is), CorruptionError);
  }
  {
    std::string bad = good;
    bad[4] = 9;  // version
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_ctsr(is), CorruptionError);
  }
  {
    std::string bad = good;
    bad[5] = 7;  // dtype
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_ctsr(is), CorruptionError);
  }
  {
    std::string bad = good.substr(0, good.size() - 3);  // truncated payload
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_ctsr(is), CorruptionError);
  }
  {
    auto path = temp_file("trailing");
    std::ofstream f(path, std::ios::binary);
    f << good << "junk";
    f.close();
    CHECK_THROWS_AS(load_ctsr(path), CorruptionError);
    fs::remove(path);
  }
}

TEST_CASE("sha256 matches a known vector") {
  // FIPS 180-2 test vector: sha256("abc")
  CHECK(sha256_bytes("abc", 3) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_bytes("", 0) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("rng streams are deterministic and split streams are independent") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(123);
  auto c1 = c.split(1), c2 = c.split(2);
  bool differ = false;
  for (int i = 0; i < 8; ++i) differ = differ || (c1.next_u64() != c2.next_u64());
  CHECK(differ);

  // normal() moments sanity
  Rng n(7);
  double s = 0, s2 = 0;
  const int kN = 20000;
  for (int i = 0; i < kN; ++i) {
    double v = n.normal();
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / kN) < 0.03);
  CHECK(std::abs(s2 / kN - 1.0) < 0.05);

  // uniform_int covers bounds
  Rng u(8);
  bool lo = false, hi = false;
  for (int i = 0; i < 1000; ++i) {
    auto v = u.uniform_int(2, 5);
    CHECK(v >= 2);
    CHECK(v <= 5);
    lo = lo || v == 2;
    hi = hi || v == 5;
  }
  CHECK(lo);
  CHECK(hi);
}

TEST_CASE("ppm round trips are bit-exact") {
  auto dir = fs::temp_directory_path();
  auto p1 = dir / ("ppm_a_" + std::to_string(::getpid()) + ".ppm");
  auto p2 = dir / ("ppm_b_" + std::to_string(::getpid()) + ".ppm");

  // Build a file covering every byte value, load it, save it, compare bytes.
  {
    std::ofstream f(p1, std::ios::binary);
    f << "P6\n16 16\n255\n";
    for (int i = 0; i < 16 * 16 * 3; ++i)
      f.put(static_cast<char>(i % 256));
  }
  Tensor img = load_ppm(p1);
  REQUIRE(img.shape() == Shape{3, 16, 16});
  for (int64_t i = 0; i < img.numel(); ++i) {
    CHECK(img.ptr()[i] >= 0.f);
    CHECK(img.ptr()[i] <= 1.f);
  }
  save_ppm(p2, img);
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());

  // save(load(save(t))) == save(t) for arbitrary float images.
  Rng rng(11);
  auto t = Tensor::uniform({3, 7, 5}, rng, 0.f, 1.f);
  save_ppm(p1, t);
  save_ppm(p2, load_ppm(p1));
  std::ifstream c(p1, std::ios::binary), d(p2, std::ios::binary);
  std::stringstream sc, sd;
  sc << c.rdbuf();
  sd << d.rdbuf();
  CHECK(sc.str() == sd.str());

  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("range maps and psnr") {
  Rng rng(13);
  auto u = Tensor::uniform({3, 4, 4}, rng, 0.f, 1.f);
  auto m = to_model_range(u);
  for (int64_t i = 0; i < m.numel(); ++i) {
    CHECK(m.ptr()[i] >= -1.f);
    CHECK(m.ptr()[i] <= 1.f);
  }
  CHECK(max_abs_diff(to_unit_range(m), u) < 1e-6f);

  CHECK(std::isinf(psnr(u, u)));
  CHECK(psnr(u, u) > 0);
  auto noisy = add(u, Tensor::full({3, 4, 4}, 0.1f));
  // MSE = 0.01 -> PSNR = 10 log10(1/0.01) = 20 dB.
  CHECK(psnr(u, noisy) == doctest::Approx(20.0).epsilon(1e-6));
}
