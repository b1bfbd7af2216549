#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "composer/tensor.hpp"

namespace composer {

// "CTSR v1" tensor container: magic `CTSR`, u8 version=1, u8 dtype (0 = f32),
// u32 rank, rank x u32 extents, then the raw little-endian row-major payload.
// No padding anywhere.

void write_ctsr(std::ostream& os, const Tensor& t);
Tensor read_ctsr(std::istream& is);

void save_ctsr(const std::filesystem::path& path, const Tensor& t);
Tensor load_ctsr(const std::filesystem::path& path);

// Hex-encoded SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(const void* data, size_t len);

}  // namespace composer
