#pragma once

#include <cstdlib>
#include <filesystem>

#include "composer/bundle.hpp"
#include "composer/rng.hpp"
#include "composer/scenes.hpp"
#include "composer/tensor.hpp"

namespace composer {

// Root directory for frozen in-repo artifacts (semantic encoder weights).
// Overridable via COMPOSER_ASSETS so tests and installed builds agree.
inline std::filesystem::path assets_dir() {
  if (const char* env = std::getenv("COMPOSER_ASSETS")) return env;
  return "assets";
}

// Sobel edge map binarized at the given magnitude percentile, followed by one
// pass of morphological thinning. Replicated borders, so a constant image
// yields an all-zero sketch rather than a frame artifact.
Tensor sketch(const Tensor& image, double threshold_pct = 90.0);

// Frozen 4-layer strided conv encoder + global average pooling, L2-normalized
// to a 64-d unit vector. Weights are loaded from assets_dir()/semantic and
// never trained.
Tensor semantic_embed(const Tensor& image);

// The deterministic procedure that produced the shipped encoder weights:
// seed-0 normal init scaled by 1/sqrt(fan_in), each kernel's spatial taps
// mean-centered so flat color regions elicit no response (shape sensitivity
// over color sensitivity), zero biases. Order: conv1_w, conv1_b, ..., conv4_b.
std::vector<std::pair<std::string, Tensor>> init_semantic_weights();

// Writes the frozen encoder weights into dir (used once to create the shipped
// assets; re-running must reproduce them bit-for-bit).
void write_semantic_assets(const std::filesystem::path& dir);

// RGB zeroed where mask = 1 (the editable region), mask appended as channel 4.
Tensor make_masked(const Tensor& image, const Tensor& mask);

// Axis-aligned random rectangle mask covering 10-50% of the image area.
Tensor random_rect_mask(int64_t h, int64_t w, Rng& rng);

// Fills all eight condition slots for a dataset record: caption, depth and
// instances from ground truth, the rest extracted from the image.
Bundle decompose_all(const DatasetRecord& record, Rng& rng);

}  // namespace composer
