// SPDX-License-Identifier: Apache-2.0
#include "cbdes/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

#include "cbdes/layers.hpp"

namespace cbdes {

namespace {

constexpr double kNoise = 0.05;

class Canvas {
public:
    Canvas() : pixels_(kSceneChannels * kSceneSize * kSceneSize, 0.0) {}

    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels_[(c * kSceneSize + y) * kSceneSize + x]; }

    void plot(long y, long x, const std::array<double, 3>& color) {
        if (y < 0 || x < 0 || y >= static_cast<long>(kSceneSize) || x >= static_cast<long>(kSceneSize)) return;
        for (std::size_t c = 0; c < kSceneChannels; ++c) at(c, y, x) = color[c];
    }

    Tensor finish(std::mt19937_64& rng) && {
        std::normal_distribution<double> noise(0.0, kNoise);
        for (auto& v : pixels_) v += noise(rng);
        return Tensor({kSceneChannels, kSceneSize, kSceneSize}, std::move(pixels_));
    }

private:
    std::vector<double> pixels_;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

void draw_grating(Canvas& canvas, int variant, int orientation, std::mt19937_64& rng) {
    const double freq = 2.0 + variant;
    const double theta = (orientation ? std::numbers::pi / 2 : 0.0) + uniform(rng, -0.15, 0.15);
    const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
    std::array<double, 3> amp{};
    for (auto& a : amp) a = uniform(rng, 0.5, 1.0);
    const double kx = 2 * std::numbers::pi * freq * std::cos(theta) / kSceneSize;
    const double ky = 2 * std::numbers::pi * freq * std::sin(theta) / kSceneSize;
    for (std::size_t y = 0; y < kSceneSize; ++y)
        for (std::size_t x = 0; x < kSceneSize; ++x) {
            const double v = std::sin(kx * x + ky * y + phase);
            for (std::size_t c = 0; c < kSceneChannels; ++c) canvas.at(c, y, x) = amp[c] * v;
        }
}

void draw_strokes(Canvas& canvas, int orientation, int dense, std::mt19937_64& rng) {
    const int count = dense ? 40 : 15;
    std::uniform_int_distribution<long> pos(0, kSceneSize - 1);
    for (int s = 0; s < count; ++s) {
        const long y0 = pos(rng), x0 = pos(rng);
        const double level = uniform(rng, 0.6, 1.0);
        const std::array<double, 3> color{level, level, level};
        for (long t = -2; t <= 2; ++t) {
            switch (orientation) {
                case 0: canvas.plot(y0, x0 + t, color); break;
                case 1: canvas.plot(y0 + t, x0, color); break;
                case 2: canvas.plot(y0 + t, x0 + t, color); break;
                case 3: canvas.plot(y0 + t, x0 - t, color); break;
                default:
                    canvas.plot(y0, x0 + t, color);
                    canvas.plot(y0 + t, x0, color);
                    break;
            }
        }
    }
}

void draw_blobs(Canvas& canvas, int variant, int dominant, std::mt19937_64& rng) {
    const int count = variant + 1;
    const std::array<double, 3> weight = dominant ? std::array<double, 3>{0.3, 0.5, 1.0}
                                                  : std::array<double, 3>{1.0, 0.5, 0.3};
    for (int i = 0; i < count; ++i) {
        const double cy = uniform(rng, 6.0, 26.0), cx = uniform(rng, 6.0, 26.0);
        const double sigma = uniform(rng, 3.0, 5.0);
        for (std::size_t y = 0; y < kSceneSize; ++y)
            for (std::size_t x = 0; x < kSceneSize; ++x) {
                const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                const double v = std::exp(-r2 / (2 * sigma * sigma));
                for (std::size_t c = 0; c < kSceneChannels; ++c) canvas.at(c, y, x) += weight[c] * v;
            }
    }
}

void draw_nested(Canvas& canvas, int variant, int round, std::mt19937_64& rng) {
    const int depth = variant + 1;
    const double cy = 15.5 + uniform(rng, -3.0, 3.0), cx = 15.5 + uniform(rng, -3.0, 3.0);
    const double outer = uniform(rng, 11.0, 13.0);
    const double level = uniform(rng, 0.7, 1.0);
    for (std::size_t y = 0; y < kSceneSize; ++y)
        for (std::size_t x = 0; x < kSceneSize; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double dist = round ? std::sqrt(dy * dy + dx * dx) : std::max(std::abs(dy), std::abs(dx));
            for (int i = 0; i < depth; ++i) {
                const double radius = outer * (i + 1) / depth;
                if (std::abs(dist - radius) < 0.75)
                    for (std::size_t c = 0; c < kSceneChannels; ++c) canvas.at(c, y, x) = level;
            }
        }
}

}  // namespace

Tensor render_scene(Regime regime, int label, std::uint64_t seed) {
    if (label < 0 || label >= static_cast<int>(kNumClasses)) throw ConfigError("scene label out of range");
    std::mt19937_64 rng(seed);
    Canvas canvas;
    const int variant = label / 2, flag = label % 2;
    switch (regime) {
        case Regime::GlobalPeriodic: draw_grating(canvas, variant, flag, rng); break;
        case Regime::LocalTexture: draw_strokes(canvas, variant, flag, rng); break;
        case Regime::SmoothBlobs: draw_blobs(canvas, variant, flag, rng); break;
        case Regime::NestedShapes: draw_nested(canvas, variant, flag, rng); break;
    }
    return std::move(canvas).finish(rng);
}

std::vector<SyntheticScene> generate_dataset(std::size_t n, std::uint64_t seed) {
    if (n == 0) throw ConfigError("generate_dataset: n must be at least 1");
    std::vector<SyntheticScene> scenes;
    scenes.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t record_seed = mix_seed(seed, i);
        std::mt19937_64 rng(record_seed);
        const auto regime = static_cast<Regime>(i % kNumRegimes);
        const int label = std::uniform_int_distribution<int>(0, kNumClasses - 1)(rng);
        scenes.push_back({render_scene(regime, label, mix_seed(record_seed, 1)), regime, label, record_seed});
    }
    return scenes;
}

std::array<std::size_t, kNumRegimes> regime_counts(std::span<const SyntheticScene> scenes) {
    std::array<std::size_t, kNumRegimes> counts{};
    for (const auto& s : scenes) ++counts[static_cast<std::size_t>(s.regime)];
    return counts;
}

Tensor stack_images(std::span<const SyntheticScene> scenes, std::span<const std::size_t> indices) {
    if (indices.empty()) throw DimensionError("stack_images: empty batch");
    const std::size_t per_image = kSceneChannels * kSceneSize * kSceneSize;
    std::vector<double> data(indices.size() * per_image);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= scenes.size())
            throw std::out_of_range("stack_images: index " + std::to_string(indices[i]) + " beyond dataset");
        const auto src = scenes[indices[i]].image.data();
        std::copy(src.begin(), src.end(), data.begin() + static_cast<long>(i * per_image));
    }
    return Tensor({indices.size(), kSceneChannels, kSceneSize, kSceneSize}, std::move(data));
}

std::vector<int> gather_labels(std::span<const SyntheticScene> scenes, std::span<const std::size_t> indices) {
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (auto i : indices) {
        if (i >= scenes.size()) throw std::out_of_range("gather_labels: index " + std::to_string(i) + " beyond dataset");
        labels.push_back(scenes[i].label);
    }
    return labels;
}

}  // namespace cbdes
