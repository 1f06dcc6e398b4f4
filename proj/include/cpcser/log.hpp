#pragma once

#include <string>

namespace cpcser {

/// Verbosity from CPCSER_LOG: 0 silent, 1 progress (default), 2 per-step detail.
int log_level();
void set_log_level(int level);

/// Writes one line to stderr when level <= log_level().
void log_line(int level, const std::string& message);

}  // namespace cpcser
