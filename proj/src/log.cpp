#include "log.hpp"

#include <atomic>
#include <iostream>

namespace speechprune {

namespace {
std::atomic<int> g_level{static_cast<int>(LogLevel::warn)};
}

void set_log_level(LogLevel level) { g_level = static_cast<int>(level); }

void log_warn(const std::string& message) {
    if (g_level >= static_cast<int>(LogLevel::warn)) {
        std::cerr << "[speechprune] warning: " << message << '\n';
    }
}

void log_info(const std::string& message) {
    if (g_level >= static_cast<int>(LogLevel::info)) {
        std::cerr << "[speechprune] " << message << '\n';
    }
}

}  // namespace speechprune
