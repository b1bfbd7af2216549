#pragma once

#include <filesystem>

#include "composer/tensor.hpp"

namespace composer {

// Images are [3,H,W] float tensors in [0,1]; PPM is binary P6, maxval 255.
// load(save(t)) and save(load(p)) are bit-exact round trips.
Tensor load_ppm(const std::filesystem::path& path);
void save_ppm(const std::filesystem::path& path, const Tensor& image);

// [-1,1] model range <-> [0,1] storage range.
Tensor to_model_range(const Tensor& unit);
Tensor to_unit_range(const Tensor& model);

// Peak signal-to-noise ratio in dB between two [0,1] images (MAX = 1).
double psnr(const Tensor& a, const Tensor& b);

}  // namespace composer
