#pragma once

// Reference implementations used only by tests. They operate on plain vectors
// with naive loops and share no code with the library's merge paths.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <utility>
#include <vector>

namespace patchkit::oracle {

inline std::vector<float> subtract(const std::vector<float>& a, const std::vector<float>& b) {
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

// general + w_0*t_0 + w_1*t_1 + ..., F32 rounding after every operation, in
// the order given.
inline std::vector<float> task_arithmetic(const std::vector<float>& general,
                                          const std::vector<std::pair<double, std::vector<float>>>& skills) {
  std::vector<float> out = general;
  for (const auto& [omega, tau] : skills) {
    const float w = static_cast<float>(omega);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const float product = w * tau[i];
      out[i] = out[i] + product;
    }
  }
  return out;
}

// Keeps the k largest magnitudes by full sort on (|v| desc, index asc).
inline std::vector<float> trim_by_sort(const std::vector<float>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const float ma = std::fabs(v[a]), mb = std::fabs(v[b]);
    return ma != mb ? ma > mb : a < b;
  });
  std::vector<float> out(v.size(), 0.0f);
  for (std::size_t i = 0; i < k && i < idx.size(); ++i) out[idx[i]] = v[idx[i]];
  return out;
}

}  // namespace patchkit::oracle
