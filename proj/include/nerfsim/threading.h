#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace nerfsim {

// Static block partition: worker w handles [begin_w, end_w). Each worker gets
// a contiguous range and a stable worker index, so per-worker accumulators can
// be reduced in a fixed order afterwards.
inline void parallel_for(int64_t n, int threads,
                         const std::function<void(int64_t, int64_t, int)>& fn) {
  if (threads <= 1 || n < 2) {
    fn(0, n, 0);
    return;
  }
  threads = int(std::min<int64_t>(threads, n));
  std::vector<std::thread> pool;
  pool.reserve(threads);
  int64_t chunk = (n + threads - 1) / threads;
  for (int w = 0; w < threads; ++w) {
    int64_t b = w * chunk;
    int64_t e = std::min<int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([=, &fn] { fn(b, e, w); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace nerfsim
