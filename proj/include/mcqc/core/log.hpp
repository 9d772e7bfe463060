#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string_view>

namespace mcqc::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

inline std::atomic<Level>& threshold() {
  static std::atomic<Level> level{Level::info};
  return level;
}

inline void set_level(Level l) { threshold() = l; }

inline void write(Level l, std::string_view tag, std::string_view msg) {
  if (l < threshold().load()) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << "[" << tag << "] " << msg << '\n';
}

inline void info(std::string_view msg) { write(Level::info, "info", msg); }
inline void warn(std::string_view msg) { write(Level::warn, "warn", msg); }
inline void error(std::string_view msg) { write(Level::error, "error", msg); }

}  // namespace mcqc::log
