#pragma once

namespace otfs {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace otfs
