#pragma once

#include <functional>
#include <string_view>

namespace pdiar {

using WarningHandler = std::function<void(std::string_view)>;

// Default handler writes "pdiar: warning: <msg>" to stderr.
void warn(std::string_view message);

// Returns the previous handler. Passing an empty function restores the default.
WarningHandler set_warning_handler(WarningHandler handler);

}  // namespace pdiar
