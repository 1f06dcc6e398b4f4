#include "cpcser/log.hpp"

#include <cstdio>
#include <cstdlib>
#include <mutex>

namespace cpcser {

namespace {

int initial_level() {
  const char* env = std::getenv("CPCSER_LOG");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0') return 1;
  return static_cast<int>(v);
}

int& level_ref() {
  static int level = initial_level();
  return level;
}

std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

int log_level() { return level_ref(); }
void set_log_level(int level) { level_ref() = level; }

void log_line(int level, const std::string& message) {
  if (level > log_level()) return;
  std::lock_guard lock(log_mutex());
  std::fprintf(stderr, "%s\n", message.c_str());
}

}  // namespace cpcser
