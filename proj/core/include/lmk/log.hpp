#pragma once

#include <functional>
#include <string>

namespace lmk::log {

enum class Level { Debug, Info, Warn };

using Sink = std::function<void(Level, const std::string&)>;

/// Replaces the stderr sink; pass nullptr to restore the default.
void set_sink(Sink sink);
void set_verbose(bool verbose);
bool verbose();

void debug(const std::string& msg);
void info(const std::string& msg);
void warn(const std::string& msg);

}  // namespace lmk::log
