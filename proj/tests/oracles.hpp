// SPDX-License-Identifier: Apache-2.0
//
// Test-only reference implementations. These are deliberately the dumbest
// possible loops, independent of the library's execution paths, so they can
// serve as oracles for the fast(er) code under test.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mapkd/grid4.hpp"
#include "mapkd/rng.hpp"

namespace oracle {

using mapkd::Grid4;
using mapkd::Shape4;

inline Grid4 random_grid(Shape4 s, mapkd::Rng& rng, double lo = -10.0, double hi = 10.0) {
  Grid4 g(s);
  for (std::int64_t i = 0; i < g.numel(); ++i) g.data()[i] = rng.uniform(lo, hi);
  return g;
}

// Six nested loops, zero cleverness.
inline Grid4 conv2d_naive(const Grid4& x, const Grid4& w, const Grid4& b, std::int64_t stride,
                          std::int64_t pad) {
  const auto xs = x.shape(), ws = w.shape();
  const std::int64_t B = xs[0], IC = xs[1], IH = xs[2], IW = xs[3];
  const std::int64_t OC = ws[0], KH = ws[2], KW = ws[3];
  const std::int64_t OH = (IH + 2 * pad - KH) / stride + 1;
  const std::int64_t OW = (IW + 2 * pad - KW) / stride + 1;
  Grid4 out(Shape4{B, OC, OH, OW});
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t oc = 0; oc < OC; ++oc)
      for (std::int64_t oh = 0; oh < OH; ++oh)
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          double acc = b.valid() ? b.data()[oc] : 0.0;
          for (std::int64_t ic = 0; ic < IC; ++ic)
            for (std::int64_t kh = 0; kh < KH; ++kh)
              for (std::int64_t kw = 0; kw < KW; ++kw) {
                std::int64_t ih = oh * stride + kh - pad;
                std::int64_t iw = ow * stride + kw - pad;
                if (ih < 0 || ih >= IH || iw < 0 || iw >= IW) continue;
                acc += x.at(n, ic, ih, iw) * w.at(oc, ic, kh, kw);
              }
          out.at(n, oc, oh, ow) = acc;
        }
  return out;
}

inline Grid4 linear_naive(const Grid4& x, const Grid4& w, const Grid4& b) {
  const auto xs = x.shape(), ws = w.shape();
  const std::int64_t rows = xs[0] * xs[1] * xs[2], din = xs[3], dout = ws[2];
  Grid4 out(Shape4{xs[0], xs[1], xs[2], dout});
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < dout; ++j) {
      double acc = b.valid() ? b.data()[j] : 0.0;
      for (std::int64_t k = 0; k < din; ++k) acc += x.data()[r * din + k] * w.data()[j * din + k];
      out.data()[r * dout + j] = acc;
    }
  return out;
}

inline Grid4 matmul_naive(const Grid4& x, const Grid4& y, bool transpose_b) {
  const auto xs = x.shape(), ys = y.shape();
  const std::int64_t M = xs[2], K = xs[3], N = transpose_b ? ys[2] : ys[3];
  Grid4 out(Shape4{xs[0], xs[1], M, N});
  for (std::int64_t b0 = 0; b0 < xs[0]; ++b0)
    for (std::int64_t c = 0; c < xs[1]; ++c)
      for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t j = 0; j < N; ++j) {
          double acc = 0.0;
          for (std::int64_t k = 0; k < K; ++k)
            acc += x.at(b0, c, i, k) * (transpose_b ? y.at(b0, c, j, k) : y.at(b0, c, k, j));
          out.at(b0, c, i, j) = acc;
        }
  return out;
}

inline Grid4 softmax_rows_naive(const Grid4& x, double t) {
  const auto s = x.shape();
  Grid4 out(s);
  const std::int64_t rows = s[0] * s[1] * s[2], w = s[3];
  for (std::int64_t r = 0; r < rows; ++r) {
    double m = -1e300;
    for (std::int64_t j = 0; j < w; ++j) m = std::max(m, x.data()[r * w + j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < w; ++j) z += std::exp((x.data()[r * w + j] - m) / t);
    for (std::int64_t j = 0; j < w; ++j)
      out.data()[r * w + j] = std::exp((x.data()[r * w + j] - m) / t) / z;
  }
  return out;
}

inline double max_abs_diff(const Grid4& a, const Grid4& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline bool bit_equal(const Grid4& a, const Grid4& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace oracle
