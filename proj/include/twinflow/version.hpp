#pragma once

namespace twinflow {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace twinflow
