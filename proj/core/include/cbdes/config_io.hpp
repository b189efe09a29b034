// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>

#include "cbdes/trainer.hpp"

namespace cbdes {

/// Canonical JSON text of a run configuration (sorted keys, round-trip
/// exact doubles).
std::string to_json(const TrainConfig& config);

/// Applies the keys present in `json` on top of `base`. Unknown keys and
/// ill-typed values raise ConfigError.
TrainConfig apply_json(std::string_view json, TrainConfig base);

}  // namespace cbdes
