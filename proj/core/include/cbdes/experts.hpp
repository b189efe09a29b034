// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include "cbdes/layers.hpp"
#include "cbdes/tensor.hpp"

namespace cbdes {

/// The four backbone paradigms of the expert pool. Integer ids are stable.
enum class ExpertKind : int {
    WindowedAttention = 0,
    ResidualConv = 1,
    ModernConv = 2,
    PyramidAttention = 3,
};

inline constexpr std::array<ExpertKind, 4> kAllExpertKinds = {
    ExpertKind::WindowedAttention, ExpertKind::ResidualConv, ExpertKind::ModernConv,
    ExpertKind::PyramidAttention};

std::string_view expert_kind_name(ExpertKind kind);
ExpertKind expert_kind_from_id(int id);
std::optional<ExpertKind> parse_expert_kind(std::string_view name);

/// Every expert reduces spatial resolution by this factor in three x2 stages.
inline constexpr std::size_t kExpertDownsample = 8;

/// A backbone network mapping [B,Cin,H,W] to [B,out_channels(),H/8,W/8].
class Expert {
public:
    virtual ~Expert() = default;

    virtual ExpertKind kind() const noexcept = 0;
    virtual std::size_t out_channels() const noexcept = 0;
    std::size_t in_channels() const noexcept { return in_channels_; }
    /// Checks the input shape ([B,Cin,H,W], H and W divisible by 8), then runs
    /// the network.
    Tensor forward(const Tensor& image, Mode mode);

    const ParameterSet& parameters() const noexcept { return params_; }
    std::size_t parameter_count() const { return params_.parameter_count(); }

protected:
    explicit Expert(std::size_t in_channels) : in_channels_(in_channels) {}
    virtual Tensor run(const Tensor& image, Mode mode) = 0;

    ParameterSet params_;

private:
    std::size_t in_channels_;
};

/// Builds a toy expert of the given paradigm. `width` scales every channel
/// count; width 1 is the desk-scale default.
std::unique_ptr<Expert> build_expert(ExpertKind kind, std::size_t in_channels, std::uint64_t seed,
                                     std::size_t width = 1);

/// Counts expert forward passes in units of images.
struct ForwardStats {
    std::size_t expert_forwards = 0;
};

/// K experts plus 1x1-conv adapters that project each expert's output to a
/// common [B, out_channels, H/8, W/8] shape.
class ExpertBundle {
public:
    static constexpr std::size_t kDefaultOutChannels = 64;

    ExpertBundle(std::vector<ExpertKind> kinds, std::size_t in_channels, std::uint64_t seed,
                 std::size_t out_channels = kDefaultOutChannels, std::size_t width = 1);

    std::size_t size() const noexcept { return experts_.size(); }
    std::size_t in_channels() const noexcept { return in_channels_; }
    std::size_t out_channels() const noexcept { return out_channels_; }
    const std::vector<ExpertKind>& kinds() const noexcept { return kinds_; }
    const Expert& expert(std::size_t k) const { return *experts_.at(k); }

    /// Post-adapter output of expert k.
    Tensor forward(std::size_t k, const Tensor& image, Mode mode, ForwardStats* stats = nullptr);
    /// Post-adapter outputs of every expert, in expert order.
    std::vector<Tensor> forward_all(const Tensor& image, Mode mode, ForwardStats* stats = nullptr);

    /// Parameters of expert k and its adapter, names prefixed
    /// "expert<k>." and "adapter<k>.".
    ParameterSet parameters() const;

private:
    std::vector<ExpertKind> kinds_;
    std::size_t in_channels_;
    std::size_t out_channels_;
    std::vector<std::unique_ptr<Expert>> experts_;
    std::vector<ParameterSet> adapter_params_;
    std::vector<Conv2d> adapters_;
};

/// Expert kinds for a pool of K experts: the four paradigms in id order,
/// cycling when K > 4.
std::vector<ExpertKind> default_expert_kinds(std::size_t k);

}  // namespace cbdes
