#include "redteam/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace redteam::log {
namespace {

std::atomic<Level> g_level{Level::Warn};
std::mutex g_mutex;

std::string_view name(Level level) {
  switch (level) {
    case Level::Debug: return "debug";
    case Level::Info: return "info";
    case Level::Warn: return "warn";
    case Level::Error: return "error";
  }
  return "?";
}

}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void write(Level level, std::string_view message) {
  if (level < g_level.load()) return;
  std::lock_guard lock(g_mutex);
  std::cerr << name(level) << ' ' << message << '\n';
}

}  // namespace redteam::log
