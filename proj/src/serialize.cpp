#include "composer/serialize.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <vector>

#include "composer/errors.hpp"

namespace composer {

namespace {

static_assert(std::endian::native == std::endian::little,
              "CTSR I/O assumes a little-endian host");

constexpr char kMagic[4] = {'C', 'T', 'S', 'R'};
constexpr uint8_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw CorruptionError("ctsr: truncated header");
  return v;
}

}  // namespace

void write_ctsr(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  os.put(static_cast<char>(kVersion));
  os.put(static_cast<char>(kDtypeF32));
  write_u32(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape()) {
    if (d < 0 || d > 0xFFFFFFFFll)
      throw ContractError("ctsr: extent out of u32 range");
    write_u32(os, static_cast<uint32_t>(d));
  }
  os.write(reinterpret_cast<const char*>(t.ptr()),
           static_cast<std::streamsize>(sizeof(float) * t.data().size()));
  if (!os) throw IoError("ctsr: write failed");
}

Tensor read_ctsr(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw CorruptionError("ctsr: bad magic");
  int version = is.get();
  int dtype = is.get();
  if (!is) throw CorruptionError("ctsr: truncated header");
  if (version != kVersion)
    throw CorruptionError("ctsr: unsupported version " + std::to_string(version));
  if (dtype != kDtypeF32)
    throw CorruptionError("ctsr: unsupported dtype " + std::to_string(dtype));
  uint32_t rank = read_u32(is);
  if (rank > 8) throw CorruptionError("ctsr: implausible rank");
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i)
    shape[i] = static_cast<int64_t>(read_u32(is));
  int64_t n = shape_numel(shape);
  if (n < 0 || n > (1ll << 31))
    throw CorruptionError("ctsr: implausible element count");
  std::vector<float> data(static_cast<size_t>(n));
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(sizeof(float) * data.size()));
  if (!is) throw CorruptionError("ctsr: truncated payload");
  return Tensor::from(std::move(shape), std::move(data));
}

void save_ctsr(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  write_ctsr(os, t);
  os.close();
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor load_ctsr(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path.string());
  Tensor t = read_ctsr(is);
  // The container is self-delimiting; trailing bytes mean corruption.
  is.peek();
  if (!is.eof()) throw CorruptionError("ctsr: trailing bytes in " + path.string());
  return t;
}

std::string sha256_bytes(const void* data, size_t len) {
  std::array<unsigned char, 32> digest{};
  unsigned int out_len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data, len) != 1 ||
      EVP_DigestFinal_ex(ctx, digest.data(), &out_len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha256 computation failed");
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (unsigned char b : digest) {
    out.push_back(hex[b >> 4]);
    out.push_back(hex[b & 0xF]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(is)),
                        std::istreambuf_iterator<char>());
  return sha256_bytes(buf.data(), buf.size());
}

}  // namespace composer
