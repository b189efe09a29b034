// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "cbdes/tensor.hpp"

namespace cbdes {

inline constexpr std::size_t kSceneChannels = 3;
inline constexpr std::size_t kSceneSize = 32;
inline constexpr std::size_t kNumRegimes = 4;
inline constexpr std::size_t kNumClasses = 10;

/// Generating process of a synthetic scene.
enum class Regime : int {
    GlobalPeriodic = 0,  // full-image gratings; label = frequency x orientation
    LocalTexture = 1,    // short strokes; label = stroke orientation x density
    SmoothBlobs = 2,     // wide gaussian blobs; label = blob count x dominant channel
    NestedShapes = 3,    // concentric outlines; label = nesting depth x outline shape
};

struct SyntheticScene {
    Tensor image;  // [3,32,32]
    Regime regime;
    int label;
    /// Per-record seed: the label is drawn from it and the image is
    /// rendered from mix_seed(seed, 1).
    std::uint64_t seed;
};

/// Renders the scene of one (regime, label) pair from `seed`.
Tensor render_scene(Regime regime, int label, std::uint64_t seed);

/// n scenes, regimes assigned round-robin (balanced to within one), labels
/// uniform per regime. Reproducible from `seed`.
std::vector<SyntheticScene> generate_dataset(std::size_t n, std::uint64_t seed);

std::array<std::size_t, kNumRegimes> regime_counts(std::span<const SyntheticScene> scenes);

/// Stacks the selected scenes into a [B,3,32,32] batch.
Tensor stack_images(std::span<const SyntheticScene> scenes, std::span<const std::size_t> indices);
std::vector<int> gather_labels(std::span<const SyntheticScene> scenes, std::span<const std::size_t> indices);

}  // namespace cbdes
