#pragma once

#include <string>

namespace speechprune {

enum class LogLevel { quiet = 0, warn = 1, info = 2 };

void set_log_level(LogLevel level);
void log_warn(const std::string& message);
void log_info(const std::string& message);

}  // namespace speechprune
