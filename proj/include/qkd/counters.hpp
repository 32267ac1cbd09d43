#pragma once

// Per-thread call counters on the learned-model entry points. Each run is
// single-threaded, so a before/after difference attributes calls to one run.

#include <cstdint>

namespace qkd {

struct CallCounters {
  std::uint64_t tcn_predict = 0;
  std::uint64_t ppo_act = 0;
  std::uint64_t ppo_update = 0;
};

inline CallCounters& call_counters() {
  thread_local CallCounters c;
  return c;
}

}  // namespace qkd
