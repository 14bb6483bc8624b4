#pragma once

#include <cstddef>
#include <cstdlib>
#include <deque>
#include <future>
#include <string>
#include <thread>
#include <type_traits>

namespace patchkit {

// Thread count for per-tensor work: an explicit request wins, then the
// PATCHKIT_THREADS environment variable, then the machine's parallelism.
inline unsigned resolve_threads(unsigned requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("PATCHKIT_THREADS")) {
    try {
      const long value = std::stol(env);
      if (value > 0) return static_cast<unsigned>(value);
    } catch (...) {
    }
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Runs produce(i) for i in [0, count) on up to `threads` workers and hands
// the results to consume(i, result) strictly in index order. At most
// `threads` results are alive at once, which bounds memory for streaming.
template <class Produce, class Consume>
void ordered_parallel_for(std::size_t count, unsigned threads, Produce&& produce, Consume&& consume) {
  using Result = std::invoke_result_t<Produce&, std::size_t>;
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) consume(i, produce(i));
    return;
  }
  std::deque<std::future<Result>> inflight;
  std::size_t consumed = 0;
  for (std::size_t i = 0; i < count; ++i) {
    inflight.push_back(std::async(std::launch::async, [&produce, i] { return produce(i); }));
    if (inflight.size() >= threads) {
      auto result = inflight.front().get();
      inflight.pop_front();
      consume(consumed++, std::move(result));
    }
  }
  while (!inflight.empty()) {
    auto result = inflight.front().get();
    inflight.pop_front();
    consume(consumed++, std::move(result));
  }
}

}  // namespace patchkit
