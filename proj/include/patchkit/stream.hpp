#pragma once

#include <algorithm>
#include <filesystem>
#include <stdexcept>
#include <span>
#include <vector>

#include "patchkit/checkpoint.hpp"
#include "patchkit/parallel.hpp"

namespace patchkit {

// One computed output tensor: F32 values for floating outputs, stored bytes
// for pass-through tensors.
struct OutputTensor {
  std::vector<float> values;
  std::vector<std::byte> raw;
  double max_abs_delta = 0.0;
};

struct WriteOptions {
  WriteMode mode = WriteMode::fail_if_exists;
  unsigned threads = 0;  // 0: resolve_threads()
};

// Computes every tensor of `layout` (sorted by name) with produce(i) and
// writes it to `path` in that order. Peak memory is bounded by the thread
// count times the largest per-tensor working set. observe(i, tensor) sees
// each result just before it is written.
template <class Produce, class Observe>
CheckpointManifest stream_checkpoint(const std::filesystem::path& path, std::vector<TensorSpec> layout,
                                     const Metadata& metadata, const WriteOptions& options, Produce&& produce,
                                     Observe&& observe) {
  if (!std::is_sorted(layout.begin(), layout.end(),
                      [](const TensorSpec& a, const TensorSpec& b) { return a.name < b.name; })) {
    throw std::logic_error("stream_checkpoint needs a name-sorted layout");
  }
  CheckpointWriter writer(path, layout, metadata, options.mode);
  ordered_parallel_for(layout.size(), resolve_threads(options.threads), produce,
                       [&](std::size_t i, OutputTensor tensor) {
                         observe(i, tensor);
                         if (is_arithmetic(layout[i].dtype)) {
                           writer.write_values(tensor.values);
                         } else {
                           writer.write_raw(tensor.raw);
                         }
                       });
  return writer.commit();
}

template <class Produce>
CheckpointManifest stream_checkpoint(const std::filesystem::path& path, std::vector<TensorSpec> layout,
                                     const Metadata& metadata, const WriteOptions& options, Produce&& produce) {
  return stream_checkpoint(path, std::move(layout), metadata, options, std::forward<Produce>(produce),
                           [](std::size_t, const OutputTensor&) {});
}

}  // namespace patchkit
