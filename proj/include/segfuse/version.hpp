#pragma once

namespace segfuse {

inline constexpr const char* kVersion = "0.1.0";

} // namespace segfuse
