#include "lightclip/instrumentation.hpp"

namespace lightclip::instrumentation {

namespace {
std::atomic<std::uint64_t> g_fusion{0};
std::atomic<std::uint64_t> g_token_loss{0};
std::atomic<std::uint64_t> g_hungarian{0};
std::atomic<std::uint64_t> g_skipped_token{0};
std::atomic<std::uint64_t> g_skipped_mlm{0};
}  // namespace

Counters snapshot() {
  return {g_fusion.load(), g_token_loss.load(), g_hungarian.load(), g_skipped_token.load(),
          g_skipped_mlm.load()};
}

void reset() {
  g_fusion = 0;
  g_token_loss = 0;
  g_hungarian = 0;
  g_skipped_token = 0;
  g_skipped_mlm = 0;
}

void count_fusion() { g_fusion.fetch_add(1, std::memory_order_relaxed); }
void count_token_loss() { g_token_loss.fetch_add(1, std::memory_order_relaxed); }
void count_hungarian() { g_hungarian.fetch_add(1, std::memory_order_relaxed); }
void count_skipped_token_sample() { g_skipped_token.fetch_add(1, std::memory_order_relaxed); }
void count_skipped_mlm_sample() { g_skipped_mlm.fetch_add(1, std::memory_order_relaxed); }

}  // namespace lightclip::instrumentation
