#pragma once

#include <vector>

#include "cmt/tensor.hpp"

namespace cmt::test {

// Per-pixel FFA oracle over the index grid, consuming draws in order: draws[0]
// fills the fixed weight, the rest go to patch pixels in raster order.
inline Tensor loop_ffa(const Tensor& i1, const Tensor& i2, std::size_t p, std::size_t m, std::size_t n,
                        const std::vector<double>& draws) {
  const std::size_t h = i1.dim(0), w = i1.dim(1);
  const double z_fixed = draws[0], zd_fixed = 1.0 - draws[0];
  std::size_t next = 1;
  Tensor out(Shape{h, w}, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double mij, mdij;
      if (m * h / p < i && i < (m + 1) * h / p && n * w / p < j && j < (n + 1) * w / p) {
        const double z_hat = draws[next++];
        mij = z_hat;
        mdij = 1.0 - z_hat;
      } else {
        mij = z_fixed;
        mdij = zd_fixed;
      }
      out.at({i, j}) = i1.at({i, j}) * mij + i2.at({i, j}) * mdij;
    }
  return out;
}

}  // namespace cmt::test
