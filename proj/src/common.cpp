#include "treereg/common.hpp"

#include <atomic>
#include <cstdio>

namespace treereg {

namespace {
std::atomic<std::uint64_t> g_warn_count{0};
}

void warn(const std::string& msg) {
  g_warn_count.fetch_add(1, std::memory_order_relaxed);
  std::fprintf(stderr, "warning: %s\n", msg.c_str());
}

std::uint64_t warn_count() { return g_warn_count.load(std::memory_order_relaxed); }

}  // namespace treereg
