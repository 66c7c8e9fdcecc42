#pragma once

namespace certvote {

inline constexpr const char* kVersion = "0.1.0";

// Version tag of the persisted model document.
inline constexpr int kModelFormatVersion = 1;
inline constexpr const char* kModelFormatName = "certvote-net";

}  // namespace certvote
