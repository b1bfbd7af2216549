#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "composer/scenes.hpp"

namespace composer {

// Record layout under a dataset directory (NNNNNN = zero-padded index):
//   NNNNNN.ppm          image
//   NNNNNN.depth.ctsr   [1,64,64] depth
//   NNNNNN.inst.ctsr    [4,64,64] one-hot instances
//   NNNNNN.caption.txt  caption text (one line)
//   index.txt           one line per record: `NNNNNN <seed>`
void save_record(const std::filesystem::path& dir, int64_t index,
                 const DatasetRecord& rec);
DatasetRecord load_record(const std::filesystem::path& dir, int64_t index,
                          uint64_t seed);

void write_dataset(const std::filesystem::path& dir,
                   const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> load_dataset(const std::filesystem::path& dir);

}  // namespace composer
