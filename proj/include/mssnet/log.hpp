#pragma once

#include <functional>
#include <string>

namespace mssnet {

using WarningSink = std::function<void(const std::string&)>;

/// Replaces the warning sink (default writes "warning: ..." to stderr).
/// Returns the previous sink. Passing an empty function restores the default.
WarningSink set_warning_sink(WarningSink sink);
void warn(const std::string& message);

}  // namespace mssnet
