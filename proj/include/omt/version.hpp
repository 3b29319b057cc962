#pragma once

namespace omt {

inline constexpr const char* version = "0.1.0";

} // namespace omt
