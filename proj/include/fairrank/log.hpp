#pragma once

// Minimal leveled logging to stderr. The threshold comes from FAIRRANK_LOG
// (error | warn | info | debug), default info.

#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <string>
#include <string_view>

namespace fairrank::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

inline Level parse_level(std::string_view s, Level fallback = Level::info) {
  if (s == "error") return Level::error;
  if (s == "warn" || s == "warning") return Level::warn;
  if (s == "info") return Level::info;
  if (s == "debug") return Level::debug;
  return fallback;
}

inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("FAIRRANK_LOG");
    return env ? parse_level(env) : Level::info;
  }();
  return level;
}

inline void write(Level level, std::string_view msg) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  static std::mutex mu;
  static constexpr const char* tags[] = {"error", "warn", "info", "debug"};
  std::lock_guard lock(mu);
  std::fprintf(stderr, "[fairrank %s] %.*s\n", tags[static_cast<int>(level)],
               static_cast<int>(msg.size()), msg.data());
}

inline void error(std::string_view msg) { write(Level::error, msg); }
inline void warn(std::string_view msg) { write(Level::warn, msg); }
inline void info(std::string_view msg) { write(Level::info, msg); }
inline void debug(std::string_view msg) { write(Level::debug, msg); }

}  // namespace fairrank::log
