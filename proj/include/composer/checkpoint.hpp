#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "composer/params.hpp"
#include "composer/trainer.hpp"

namespace composer {

// On-disk training state: a directory of CTSR tensors plus
//   manifest.txt  one line per tensor: `name shape dtype sha256`
//   config.txt    `key=value` lines (model/optimizer config, step, counters)
// Every tensor digest is verified on load; a mismatch names the tensor.
struct Checkpoint {
  ParamMap live;
  ParamMap ema;
  AdamState adam;
  int64_t step = 0;
  std::map<std::string, std::string> config;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// key=value file helpers shared by checkpoints and CLI config files.
std::map<std::string, std::string> read_kv_file(
    const std::filesystem::path& path);
void write_kv_file(const std::filesystem::path& path,
                   const std::map<std::string, std::string>& kv);

}  // namespace composer
