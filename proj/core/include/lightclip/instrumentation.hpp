#pragma once

#include <atomic>
#include <cstdint>

namespace lightclip::instrumentation {

/// Process-wide call counters for the training-only code paths. Evaluation
/// asserts that fusion and the matching loss never run at inference.
struct Counters {
  std::uint64_t fusion_calls = 0;
  std::uint64_t token_loss_calls = 0;
  std::uint64_t hungarian_calls = 0;
  std::uint64_t skipped_token_samples = 0;
  std::uint64_t skipped_mlm_samples = 0;
};

Counters snapshot();
void reset();

void count_fusion();
void count_token_loss();
void count_hungarian();
void count_skipped_token_sample();
void count_skipped_mlm_sample();

}  // namespace lightclip::instrumentation
