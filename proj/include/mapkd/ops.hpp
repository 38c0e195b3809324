// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mapkd/grid4.hpp"
#include "mapkd/tape.hpp"

// Differentiable primitives. Every op computes its forward value and, when
// handed a tape and at least one input requires grad, records one backward
// closure. All math is 64-bit and single-threaded; execution order is fixed,
// so results are bit-identical across runs for identical inputs.

namespace mapkd::ops {

namespace detail {

inline bool want_tape(Tape* tape, std::initializer_list<const Grid4*> ins) {
  if (!tape) return false;
  for (const Grid4* g : ins)
    if (g->valid() && g->requires_grad()) return true;
  return false;
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Grid4 add(Grid4 a, Grid4 b, Tape* tape = nullptr) {
  check_same_shape(a, b, "add");
  Grid4 out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::want_tape(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Grid4 sub(Grid4 a, Grid4 b, Tape* tape = nullptr) {
  check_same_shape(a, b, "sub");
  Grid4 out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (detail::want_tape(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Grid4 mul(Grid4 a, Grid4 b, Tape* tape = nullptr) {
  check_same_shape(a, b, "mul");
  Grid4 out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::want_tape(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
      }
    });
  }
  return out;
}

inline Grid4 scale(Grid4 x, double c, Tape* tape = nullptr) {
  Grid4 out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, c]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
    });
  }
  return out;
}

inline Grid4 add_scalar(Grid4 x, double c, Tape* tape = nullptr) {
  Grid4 out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] + c;
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

inline Grid4 relu(Grid4 x, Tape* tape = nullptr) {
  Grid4 out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x.data()[i] > 0.0) gx[i] += g[i];
    });
  }
  return out;
}

inline Grid4 sigmoid(Grid4 x, Tape* tape = nullptr) {
  Grid4 out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = detail::stable_sigmoid(x.data()[i]);
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double s = out.data()[i];
        gx[i] += g[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

/// Natural log; rejects non-positive input.
inline Grid4 log(Grid4 x, Tape* tape = nullptr) {
  Grid4 out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    if (x.data()[i] <= 0.0)
      throw ValueError("log: non-positive input " + std::to_string(x.data()[i]));
    out.data()[i] = std::log(x.data()[i]);
  }
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / x.data()[i];
    });
  }
  return out;
}

/// Square root; rejects negative input. Callers add an epsilon first when
/// the argument can reach zero, since d/dx diverges there.
inline Grid4 sqrt(Grid4 x, Tape* tape = nullptr) {
  Grid4 out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    if (x.data()[i] < 0.0)
      throw ValueError("sqrt: negative input " + std::to_string(x.data()[i]));
    out.data()[i] = std::sqrt(x.data()[i]);
  }
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 0.5 / out.data()[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Grid4 sum(Grid4 x, Tape* tape = nullptr) {
  double acc = 0.0;
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += x.data()[i];
  Grid4 out = Grid4::scalar(acc);
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      double g = out.grad_view()[0];
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

inline Grid4 mean(Grid4 x, Tape* tape = nullptr) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x, tape), 1.0 / static_cast<double>(x.numel()), tape);
}

/// Mean along the last (W) dimension: (B,C,H,W) -> (B,C,H,1).
inline Grid4 row_mean(Grid4 x, Tape* tape = nullptr) {
  const auto s = x.shape();
  if (s[3] == 0) throw ShapeError("row_mean: zero-width rows in " + shape_str(s));
  Grid4 out(Shape4{s[0], s[1], s[2], 1});
  const std::int64_t rows = s[0] * s[1] * s[2], w = s[3];
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* px = x.data() + r * w;
    for (std::int64_t j = 0; j < w; ++j) acc += px[j];
    out.data()[r] = acc / static_cast<double>(w);
  }
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, rows, w]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      const double inv = 1.0 / static_cast<double>(w);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < w; ++j) gx[static_cast<std::size_t>(r * w + j)] += g[static_cast<std::size_t>(r)] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Grid4 reshape(Grid4 x, Shape4 s, Tape* tape = nullptr) {
  if (shape_numel(s) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(s));
  Grid4 out = Grid4::from_values(s, x.values());
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

inline Grid4 permute(Grid4 x, std::array<int, 4> perm, Tape* tape = nullptr) {
  std::array<bool, 4> seen{false, false, false, false};
  for (int p : perm) {
    if (p < 0 || p > 3 || seen[static_cast<std::size_t>(p)])
      throw ShapeError("permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  const auto s = x.shape();
  Shape4 os{s[static_cast<std::size_t>(perm[0])], s[static_cast<std::size_t>(perm[1])],
            s[static_cast<std::size_t>(perm[2])], s[static_cast<std::size_t>(perm[3])]};
  Grid4 out(os);
  std::array<std::int64_t, 4> xstride{s[1] * s[2] * s[3], s[2] * s[3], s[3], 1};
  std::int64_t o = 0;
  for (std::int64_t i0 = 0; i0 < os[0]; ++i0)
    for (std::int64_t i1 = 0; i1 < os[1]; ++i1)
      for (std::int64_t i2 = 0; i2 < os[2]; ++i2)
        for (std::int64_t i3 = 0; i3 < os[3]; ++i3) {
          std::int64_t src = i0 * xstride[static_cast<std::size_t>(perm[0])] +
                             i1 * xstride[static_cast<std::size_t>(perm[1])] +
                             i2 * xstride[static_cast<std::size_t>(perm[2])] +
                             i3 * xstride[static_cast<std::size_t>(perm[3])];
          out.data()[o++] = x.data()[src];
        }
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, perm, os, xstride]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      std::int64_t o = 0;
      for (std::int64_t i0 = 0; i0 < os[0]; ++i0)
        for (std::int64_t i1 = 0; i1 < os[1]; ++i1)
          for (std::int64_t i2 = 0; i2 < os[2]; ++i2)
            for (std::int64_t i3 = 0; i3 < os[3]; ++i3) {
              std::int64_t src = i0 * xstride[static_cast<std::size_t>(perm[0])] +
                                 i1 * xstride[static_cast<std::size_t>(perm[1])] +
                                 i2 * xstride[static_cast<std::size_t>(perm[2])] +
                                 i3 * xstride[static_cast<std::size_t>(perm[3])];
              gx[static_cast<std::size_t>(src)] += g[static_cast<std::size_t>(o++)];
            }
    });
  }
  return out;
}

inline Grid4 concat_channels(Grid4 a, Grid4 b, Tape* tape = nullptr) {
  const auto sa = a.shape(), sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw ShapeError("concat_channels: incompatible " + shape_str(sa) + " vs " + shape_str(sb));
  Grid4 out(Shape4{sa[0], sa[1] + sb[1], sa[2], sa[3]});
  const std::int64_t plane = sa[2] * sa[3];
  for (std::int64_t n = 0; n < sa[0]; ++n) {
    std::copy_n(a.data() + n * sa[1] * plane, sa[1] * plane,
                out.data() + n * (sa[1] + sb[1]) * plane);
    std::copy_n(b.data() + n * sb[1] * plane, sb[1] * plane,
                out.data() + (n * (sa[1] + sb[1]) + sa[1]) * plane);
  }
  if (detail::want_tape(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, sa, sb, plane]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      for (std::int64_t n = 0; n < sa[0]; ++n) {
        if (a.requires_grad()) {
          auto& ga = a.grad();
          const double* gp = g.data() + n * (sa[1] + sb[1]) * plane;
          double* dst = ga.data() + n * sa[1] * plane;
          for (std::int64_t i = 0; i < sa[1] * plane; ++i) dst[i] += gp[i];
        }
        if (b.requires_grad()) {
          auto& gb = b.grad();
          const double* gp = g.data() + (n * (sa[1] + sb[1]) + sa[1]) * plane;
          double* dst = gb.data() + n * sb[1] * plane;
          for (std::int64_t i = 0; i < sb[1] * plane; ++i) dst[i] += gp[i];
        }
      }
    });
  }
  return out;
}

/// Concatenate along the H (row / sequence) dimension.
inline Grid4 concat_rows(Grid4 a, Grid4 b, Tape* tape = nullptr) {
  const auto sa = a.shape(), sb = b.shape();
  if (sa[0] != sb[0] || sa[1] != sb[1] || sa[3] != sb[3])
    throw ShapeError("concat_rows: incompatible " + shape_str(sa) + " vs " + shape_str(sb));
  Grid4 out(Shape4{sa[0], sa[1], sa[2] + sb[2], sa[3]});
  const std::int64_t wa = sa[2] * sa[3], wb = sb[2] * sb[3];
  for (std::int64_t n = 0; n < sa[0] * sa[1]; ++n) {
    std::copy_n(a.data() + n * wa, wa, out.data() + n * (wa + wb));
    std::copy_n(b.data() + n * wb, wb, out.data() + n * (wa + wb) + wa);
  }
  if (detail::want_tape(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, sa, wa, wb]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      for (std::int64_t n = 0; n < sa[0] * sa[1]; ++n) {
        if (a.requires_grad()) {
          auto& ga = a.grad();
          for (std::int64_t i = 0; i < wa; ++i) ga[static_cast<std::size_t>(n * wa + i)] += g[static_cast<std::size_t>(n * (wa + wb) + i)];
        }
        if (b.requires_grad()) {
          auto& gb = b.grad();
          for (std::int64_t i = 0; i < wb; ++i) gb[static_cast<std::size_t>(n * wb + i)] += g[static_cast<std::size_t>(n * (wa + wb) + wa + i)];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// spatial ops
// ---------------------------------------------------------------------------

/// Cross-correlation (no kernel flip). x:(B,IC,IH,IW), w:(OC,IC,KH,KW),
/// bias:(1,OC,1,1). Output spatial dims floor((I+2p-K)/stride)+1.
inline Grid4 conv2d(Grid4 x, Grid4 w, Grid4 bias, std::int64_t stride,
                    std::int64_t pad, Tape* tape = nullptr) {
  const auto xs = x.shape(), ws = w.shape();
  if (xs[1] != ws[1])
    throw ShapeError("conv2d: input channels of x " + shape_str(xs) + " do not match kernel " +
                     shape_str(ws));
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  if (pad < 0) throw ValueError("conv2d: pad must be >= 0");
  if (bias.valid() && (bias.shape() != Shape4{1, ws[0], 1, 1}))
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " expected (1," +
                     std::to_string(ws[0]) + ",1,1)");
  const std::int64_t B = xs[0], IC = xs[1], IH = xs[2], IW = xs[3];
  const std::int64_t OC = ws[0], KH = ws[2], KW = ws[3];
  const std::int64_t OH = (IH + 2 * pad - KH) / stride + 1;
  const std::int64_t OW = (IW + 2 * pad - KW) / stride + 1;
  if (IH + 2 * pad < KH || IW + 2 * pad < KW)
    throw ShapeError("conv2d: kernel " + shape_str(ws) + " larger than padded input " +
                     shape_str(xs));

  auto ow_lo = [pad, stride](std::int64_t kw) {
    std::int64_t a = pad - kw;
    return a <= 0 ? 0 : (a + stride - 1) / stride;
  };
  auto ow_hi = [IW, pad, stride, OW](std::int64_t kw) {
    std::int64_t num = IW - 1 + pad - kw;
    std::int64_t hi = num < 0 ? -1 : num / stride;
    return std::min(hi, OW - 1);
  };

  Grid4 out(Shape4{B, OC, OH, OW});
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
      const double bv = bias.valid() ? bias.data()[oc] : 0.0;
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        double* orow = out.data() + ((n * OC + oc) * OH + oh) * OW;
        for (std::int64_t j = 0; j < OW; ++j) orow[j] = bv;
        for (std::int64_t ic = 0; ic < IC; ++ic)
          for (std::int64_t kh = 0; kh < KH; ++kh) {
            const std::int64_t ih = oh * stride + kh - pad;
            if (ih < 0 || ih >= IH) continue;
            const double* xrow = x.data() + ((n * IC + ic) * IH + ih) * IW;
            const double* wrow = w.data() + ((oc * IC + ic) * KH + kh) * KW;
            for (std::int64_t kw = 0; kw < KW; ++kw) {
              const double wv = wrow[kw];
              const std::int64_t lo = ow_lo(kw), hi = ow_hi(kw);
              const double* xoff = xrow + kw - pad;
              if (stride == 1) {
                for (std::int64_t j = lo; j <= hi; ++j) orow[j] += wv * xoff[j];
              } else {
                for (std::int64_t j = lo; j <= hi; ++j) orow[j] += wv * xoff[j * stride];
              }
            }
          }
      }
    }

  if (detail::want_tape(tape, {&x, &w, &bias})) {
    out.set_requires_grad(true);
    Grid4 bias_c = bias;
    tape->record([x, w, bias_c, out, B, IC, IH, IW, OC, KH, KW, OH, OW, stride, pad, ow_lo,
                  ow_hi]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      if (x.requires_grad()) {
        auto& gx = x.grad();
        for (std::int64_t n = 0; n < B; ++n)
          for (std::int64_t oc = 0; oc < OC; ++oc)
            for (std::int64_t oh = 0; oh < OH; ++oh) {
              const double* grow = g.data() + ((n * OC + oc) * OH + oh) * OW;
              for (std::int64_t ic = 0; ic < IC; ++ic)
                for (std::int64_t kh = 0; kh < KH; ++kh) {
                  const std::int64_t ih = oh * stride + kh - pad;
                  if (ih < 0 || ih >= IH) continue;
                  double* gxrow = gx.data() + ((n * IC + ic) * IH + ih) * IW;
                  const double* wrow = w.data() + ((oc * IC + ic) * KH + kh) * KW;
                  for (std::int64_t kw = 0; kw < KW; ++kw) {
                    const double wv = wrow[kw];
                    const std::int64_t lo = ow_lo(kw), hi = ow_hi(kw);
                    double* gxoff = gxrow + kw - pad;
                    for (std::int64_t j = lo; j <= hi; ++j) gxoff[j * stride] += wv * grow[j];
                  }
                }
            }
      }
      if (w.requires_grad()) {
        auto& gw = w.grad();
        for (std::int64_t oc = 0; oc < OC; ++oc)
          for (std::int64_t ic = 0; ic < IC; ++ic)
            for (std::int64_t kh = 0; kh < KH; ++kh)
              for (std::int64_t kw = 0; kw < KW; ++kw) {
                double acc = 0.0;
                const std::int64_t lo = ow_lo(kw), hi = ow_hi(kw);
                for (std::int64_t n = 0; n < B; ++n)
                  for (std::int64_t oh = 0; oh < OH; ++oh) {
                    const std::int64_t ih = oh * stride + kh - pad;
                    if (ih < 0 || ih >= IH) continue;
                    const double* grow = g.data() + ((n * OC + oc) * OH + oh) * OW;
                    const double* xoff = x.data() + ((n * IC + ic) * IH + ih) * IW + kw - pad;
                    for (std::int64_t j = lo; j <= hi; ++j) acc += grow[j] * xoff[j * stride];
                  }
                gw[static_cast<std::size_t>(((oc * IC + ic) * KH + kh) * KW + kw)] += acc;
              }
      }
      if (bias_c.valid() && bias_c.requires_grad()) {
        auto& gb = bias_c.grad();
        for (std::int64_t oc = 0; oc < OC; ++oc) {
          double acc = 0.0;
          for (std::int64_t n = 0; n < B; ++n) {
            const double* gp = g.data() + (n * OC + oc) * OH * OW;
            for (std::int64_t i = 0; i < OH * OW; ++i) acc += gp[i];
          }
          gb[static_cast<std::size_t>(oc)] += acc;
        }
      }
    });
  }
  return out;
}

/// Affine map over the last dimension: x:(B,C,H,Din), w:(1,1,Dout,Din),
/// bias:(1,1,1,Dout) or invalid for none. Each (b,c,h) row is one token.
inline Grid4 linear(Grid4 x, Grid4 w, Grid4 bias, Tape* tape = nullptr) {
  const auto xs = x.shape(), ws = w.shape();
  if (ws[0] != 1 || ws[1] != 1 || xs[3] != ws[3])
    throw ShapeError("linear: inner dims disagree, x " + shape_str(xs) + " w " + shape_str(ws));
  const std::int64_t rows = xs[0] * xs[1] * xs[2], din = xs[3], dout = ws[2];
  if (bias.valid() && (bias.shape() != Shape4{1, 1, 1, dout}))
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " expected (1,1,1," +
                     std::to_string(dout) + ")");
  Grid4 out(Shape4{xs[0], xs[1], xs[2], dout});
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* px = x.data() + r * din;
    double* po = out.data() + r * dout;
    for (std::int64_t j = 0; j < dout; ++j) {
      double acc = bias.valid() ? bias.data()[j] : 0.0;
      const double* pw = w.data() + j * din;
      for (std::int64_t k = 0; k < din; ++k) acc += px[k] * pw[k];
      po[j] = acc;
    }
  }
  if (detail::want_tape(tape, {&x, &w, &bias})) {
    out.set_requires_grad(true);
    Grid4 bias_c = bias;
    tape->record([x, w, bias_c, out, rows, din, dout]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      if (x.requires_grad()) {
        auto& gx = x.grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < dout; ++j) {
            const double gv = g[static_cast<std::size_t>(r * dout + j)];
            const double* pw = w.data() + j * din;
            double* pgx = gx.data() + r * din;
            for (std::int64_t k = 0; k < din; ++k) pgx[k] += gv * pw[k];
          }
      }
      if (w.requires_grad()) {
        auto& gw = w.grad();
        for (std::int64_t j = 0; j < dout; ++j)
          for (std::int64_t k = 0; k < din; ++k) {
            double acc = 0.0;
            for (std::int64_t r = 0; r < rows; ++r)
              acc += g[static_cast<std::size_t>(r * dout + j)] * x.data()[r * din + k];
            gw[static_cast<std::size_t>(j * din + k)] += acc;
          }
      }
      if (bias_c.valid() && bias_c.requires_grad()) {
        auto& gb = bias_c.grad();
        for (std::int64_t j = 0; j < dout; ++j) {
          double acc = 0.0;
          for (std::int64_t r = 0; r < rows; ++r) acc += g[static_cast<std::size_t>(r * dout + j)];
          gb[static_cast<std::size_t>(j)] += acc;
        }
      }
    });
  }
  return out;
}

/// Batched matmul over (B,C) slices: x:(B,C,M,K) times y:(B,C,K,N), or
/// y:(B,C,N,K) with transpose_b.
inline Grid4 matmul_bc(Grid4 x, Grid4 y, bool transpose_b, Tape* tape = nullptr) {
  const auto xs = x.shape(), ys = y.shape();
  if (xs[0] != ys[0] || xs[1] != ys[1])
    throw ShapeError("matmul_bc: batch dims disagree, " + shape_str(xs) + " vs " + shape_str(ys));
  const std::int64_t M = xs[2], K = xs[3];
  const std::int64_t N = transpose_b ? ys[2] : ys[3];
  const std::int64_t yk = transpose_b ? ys[3] : ys[2];
  if (yk != K)
    throw ShapeError("matmul_bc: inner dims disagree, " + shape_str(xs) + " vs " + shape_str(ys) +
                     (transpose_b ? " (transposed)" : ""));
  const std::int64_t slices = xs[0] * xs[1];
  Grid4 out(Shape4{xs[0], xs[1], M, N});
  for (std::int64_t s = 0; s < slices; ++s) {
    const double* px = x.data() + s * M * K;
    const double* py = y.data() + s * (transpose_b ? N * K : K * N);
    double* po = out.data() + s * M * N;
    for (std::int64_t i = 0; i < M; ++i)
      for (std::int64_t j = 0; j < N; ++j) {
        double acc = 0.0;
        if (transpose_b) {
          const double* a = px + i * K;
          const double* b = py + j * K;
          for (std::int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
        } else {
          for (std::int64_t k = 0; k < K; ++k) acc += px[i * K + k] * py[k * N + j];
        }
        po[i * N + j] = acc;
      }
  }
  if (detail::want_tape(tape, {&x, &y})) {
    out.set_requires_grad(true);
    tape->record([x, y, out, slices, M, K, N, transpose_b]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      for (std::int64_t s = 0; s < slices; ++s) {
        const double* pg = g.data() + s * M * N;
        const double* px = x.data() + s * M * K;
        const double* py = y.data() + s * (transpose_b ? N * K : K * N);
        if (x.requires_grad()) {
          double* gx = x.grad().data() + s * M * K;
          for (std::int64_t i = 0; i < M; ++i)
            for (std::int64_t k = 0; k < K; ++k) {
              double acc = 0.0;
              if (transpose_b) {
                for (std::int64_t j = 0; j < N; ++j) acc += pg[i * N + j] * py[j * K + k];
              } else {
                for (std::int64_t j = 0; j < N; ++j) acc += pg[i * N + j] * py[k * N + j];
              }
              gx[i * K + k] += acc;
            }
        }
        if (y.requires_grad()) {
          double* gy = y.grad().data() + s * (transpose_b ? N * K : K * N);
          if (transpose_b) {
            for (std::int64_t j = 0; j < N; ++j)
              for (std::int64_t k = 0; k < K; ++k) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < M; ++i) acc += pg[i * N + j] * px[i * K + k];
                gy[j * K + k] += acc;
              }
          } else {
            for (std::int64_t k = 0; k < K; ++k)
              for (std::int64_t j = 0; j < N; ++j) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < M; ++i) acc += pg[i * N + j] * px[i * K + k];
                gy[k * N + j] += acc;
              }
          }
        }
      }
    });
  }
  return out;
}

/// Row softmax along W with temperature: softmax(x/t), max-subtracted.
inline Grid4 softmax_rows(Grid4 x, double temperature, Tape* tape = nullptr) {
  if (!(temperature > 0.0))
    throw ValueError("softmax_rows: temperature must be positive, got " +
                     std::to_string(temperature));
  const auto s = x.shape();
  const std::int64_t rows = s[0] * s[1] * s[2], w = s[3];
  if (w == 0) throw ShapeError("softmax_rows: zero-width rows in " + shape_str(s));
  Grid4 out(s);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* px = x.data() + r * w;
    double* po = out.data() + r * w;
    double m = px[0];
    for (std::int64_t j = 1; j < w; ++j) m = std::max(m, px[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < w; ++j) {
      po[j] = std::exp((px[j] - m) / temperature);
      z += po[j];
    }
    for (std::int64_t j = 0; j < w; ++j) po[j] /= z;
  }
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, rows, w, temperature]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* p = out.data() + r * w;
        const double* pg = g.data() + r * w;
        double dot = 0.0;
        for (std::int64_t j = 0; j < w; ++j) dot += pg[j] * p[j];
        for (std::int64_t j = 0; j < w; ++j)
          gx[static_cast<std::size_t>(r * w + j)] += p[j] * (pg[j] - dot) / temperature;
      }
    });
  }
  return out;
}

inline Grid4 avg_pool2d(Grid4 x, std::int64_t k, Tape* tape = nullptr) {
  const auto s = x.shape();
  if (k < 1 || s[2] % k != 0 || s[3] % k != 0)
    throw ShapeError("avg_pool2d: dims of " + shape_str(s) + " not divisible by k=" +
                     std::to_string(k));
  const std::int64_t B = s[0], C = s[1], OH = s[2] / k, OW = s[3] / k;
  Grid4 out(Shape4{B, C, OH, OW});
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::int64_t n = 0; n < B * C; ++n)
    for (std::int64_t oh = 0; oh < OH; ++oh)
      for (std::int64_t ow = 0; ow < OW; ++ow) {
        double acc = 0.0;
        for (std::int64_t dy = 0; dy < k; ++dy) {
          const double* px = x.data() + (n * s[2] + oh * k + dy) * s[3] + ow * k;
          for (std::int64_t dx = 0; dx < k; ++dx) acc += px[dx];
        }
        out.data()[(n * OH + oh) * OW + ow] = acc * inv;
      }
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, B, C, OH, OW, k, s, inv]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::int64_t n = 0; n < B * C; ++n)
        for (std::int64_t oh = 0; oh < OH; ++oh)
          for (std::int64_t ow = 0; ow < OW; ++ow) {
            const double gv = g[static_cast<std::size_t>((n * OH + oh) * OW + ow)] * inv;
            for (std::int64_t dy = 0; dy < k; ++dy) {
              double* pg = gx.data() + (n * s[2] + oh * k + dy) * s[3] + ow * k;
              for (std::int64_t dx = 0; dx < k; ++dx) pg[dx] += gv;
            }
          }
    });
  }
  return out;
}

/// Global mean per channel: (B,C,H,W) -> (B,C,1,1).
inline Grid4 avg_pool_full(Grid4 x, Tape* tape = nullptr) {
  const auto s = x.shape();
  if (s[2] * s[3] == 0) throw ShapeError("avg_pool_full: empty plane in " + shape_str(s));
  Grid4 out(Shape4{s[0], s[1], 1, 1});
  const std::int64_t plane = s[2] * s[3];
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::int64_t n = 0; n < s[0] * s[1]; ++n) {
    double acc = 0.0;
    const double* px = x.data() + n * plane;
    for (std::int64_t i = 0; i < plane; ++i) acc += px[i];
    out.data()[n] = acc * inv;
  }
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, s, plane, inv]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::int64_t n = 0; n < s[0] * s[1]; ++n) {
        const double gv = g[static_cast<std::size_t>(n)] * inv;
        double* pg = gx.data() + n * plane;
        for (std::int64_t i = 0; i < plane; ++i) pg[i] += gv;
      }
    });
  }
  return out;
}

inline Grid4 upsample_nearest(Grid4 x, std::int64_t f, Tape* tape = nullptr) {
  if (f < 1) throw ValueError("upsample_nearest: factor must be >= 1");
  const auto s = x.shape();
  Grid4 out(Shape4{s[0], s[1], s[2] * f, s[3] * f});
  const std::int64_t OH = s[2] * f, OW = s[3] * f;
  for (std::int64_t n = 0; n < s[0] * s[1]; ++n)
    for (std::int64_t oh = 0; oh < OH; ++oh) {
      const double* px = x.data() + (n * s[2] + oh / f) * s[3];
      double* po = out.data() + (n * OH + oh) * OW;
      for (std::int64_t ow = 0; ow < OW; ++ow) po[ow] = px[ow / f];
    }
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, s, f, OH, OW]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::int64_t n = 0; n < s[0] * s[1]; ++n)
        for (std::int64_t oh = 0; oh < OH; ++oh) {
          double* pg = gx.data() + (n * s[2] + oh / f) * s[3];
          const double* pgo = g.data() + (n * OH + oh) * OW;
          for (std::int64_t ow = 0; ow < OW; ++ow) pg[ow / f] += pgo[ow];
        }
    });
  }
  return out;
}

/// Gather the entries where mask==1 into a (1,1,1,K) vector, scan order.
/// Mask entries must be exactly 0 or 1 and are never differentiated.
inline Grid4 masked_select(Grid4 x, Grid4 mask, Tape* tape = nullptr) {
  check_same_shape(x, mask, "masked_select");
  std::vector<std::int64_t> idx;
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    double m = mask.data()[i];
    if (m != 0.0 && m != 1.0)
      throw ValueError("masked_select: mask entry " + std::to_string(m) + " is not binary");
    if (m == 1.0) idx.push_back(i);
  }
  Grid4 out(Shape4{1, 1, 1, static_cast<std::int64_t>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) out.data()[i] = x.data()[idx[i]];
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, idx = std::move(idx)]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < idx.size(); ++i) gx[static_cast<std::size_t>(idx[i])] += g[i];
    });
  }
  return out;
}

/// Extract one batch row: (B,C,H,W) -> (1,C,H,W).
inline Grid4 slice_batch(Grid4 x, std::int64_t b, Tape* tape = nullptr) {
  const auto s = x.shape();
  if (b < 0 || b >= s[0])
    throw ShapeError("slice_batch: index " + std::to_string(b) + " out of range for " +
                     shape_str(s));
  const std::int64_t n = s[1] * s[2] * s[3];
  Grid4 out(Shape4{1, s[1], s[2], s[3]});
  std::copy_n(x.data() + b * n, n, out.data());
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, b, n]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = x.grad();
      for (std::int64_t i = 0; i < n; ++i) gx[static_cast<std::size_t>(b * n + i)] += g[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

/// Cut (B,C,H,W) into non-overlapping s x s patches and flatten each to a
/// row: output (B,1,N,C*s*s) with N = (H/s)*(W/s). Patches scan the grid
/// row-major; within a patch the layout is (c, dy, dx).
inline Grid4 patchify(Grid4 x, std::int64_t s, Tape* tape = nullptr) {
  const auto xs = x.shape();
  if (s < 1 || xs[2] % s != 0 || xs[3] % s != 0)
    throw ShapeError("patchify: dims of " + shape_str(xs) + " not divisible by patch size " +
                     std::to_string(s));
  const std::int64_t B = xs[0], C = xs[1], GH = xs[2] / s, GW = xs[3] / s;
  const std::int64_t N = GH * GW, D = C * s * s;
  Grid4 out(Shape4{B, 1, N, D});
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t gy = 0; gy < GH; ++gy)
      for (std::int64_t gx = 0; gx < GW; ++gx) {
        double* po = out.data() + ((n * N) + gy * GW + gx) * D;
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t dy = 0; dy < s; ++dy) {
            const double* px = x.data() + ((n * C + c) * xs[2] + gy * s + dy) * xs[3] + gx * s;
            for (std::int64_t dx = 0; dx < s; ++dx) *po++ = px[dx];
          }
      }
  if (detail::want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, xs, B, C, GH, GW, N, D, s]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gxv = x.grad();
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t gy = 0; gy < GH; ++gy)
          for (std::int64_t gx = 0; gx < GW; ++gx) {
            const double* pg = g.data() + ((n * N) + gy * GW + gx) * D;
            for (std::int64_t c = 0; c < C; ++c)
              for (std::int64_t dy = 0; dy < s; ++dy) {
                double* px = gxv.data() + ((n * C + c) * xs[2] + gy * s + dy) * xs[3] + gx * s;
                for (std::int64_t dx = 0; dx < s; ++dx) px[dx] += *pg++;
              }
          }
    });
  }
  return out;
}

/// Per-element binary cross-entropy on logits against fixed targets in
/// [0,1], in the numerically stable form. Targets are always treated as
/// constants (distillation references are detached by definition).
inline Grid4 bce_with_logits(Grid4 logits, Grid4 targets, Tape* tape = nullptr) {
  check_same_shape(logits, targets, "bce_with_logits");
  Grid4 out(logits.shape());
  const std::int64_t n = logits.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double s = logits.data()[i], t = targets.data()[i];
    if (t < 0.0 || t > 1.0)
      throw ValueError("bce_with_logits: target " + std::to_string(t) + " outside [0,1]");
    out.data()[i] = std::max(s, 0.0) - s * t + std::log1p(std::exp(-std::abs(s)));
  }
  if (detail::want_tape(tape, {&logits})) {
    out.set_requires_grad(true);
    tape->record([logits, targets, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad_view();
      auto& gx = logits.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        gx[i] += g[i] * (detail::stable_sigmoid(logits.data()[i]) - targets.data()[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

inline Grid4 mse(Grid4 a, Grid4 b, Tape* tape = nullptr) {
  Grid4 d = sub(a, b, tape);
  return mean(mul(d, d, tape), tape);
}

struct AttentionOut {
  Grid4 q, k, v;
  Grid4 scores;  // (B,C,S,S), scaled by 1/sqrt(D), pre-softmax
  Grid4 attn;    // softmax_rows(scores, 1)
  Grid4 out;     // attn * v
};

/// Single-head scaled dot-product self-attention over token rows, built
/// from linear + matmul + softmax_rows. e:(B,C,S,D), projections (1,1,D,D).
inline AttentionOut scaled_dot_attention(Grid4 e, Grid4 wq, Grid4 wk,
                                         Grid4 wv, Tape* tape = nullptr) {
  AttentionOut r;
  r.q = linear(e, wq, Grid4{}, tape);
  r.k = linear(e, wk, Grid4{}, tape);
  r.v = linear(e, wv, Grid4{}, tape);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(e.shape()[3]));
  r.scores = scale(matmul_bc(r.q, r.k, /*transpose_b=*/true, tape), inv_sqrt_d, tape);
  r.attn = softmax_rows(r.scores, 1.0, tape);
  r.out = matmul_bc(r.attn, r.v, /*transpose_b=*/false, tape);
  return r;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  std::vector<double> per_leaf_max_rel;
  double max_rel = 0.0;
};

/// Compares tape gradients of f against central finite differences.
/// Relative error per element is |ga-gn| / max(|ga|, |gn|, 1), so tiny
/// gradients are held to an absolute tolerance instead.
inline GradCheckReport grad_check(const std::function<Grid4(Tape*)>& f, std::vector<Grid4> leaves,
                                  double step = 1e-5) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.drop_grad();
  }
  Tape tape;
  Grid4 loss = f(&tape);
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& l : leaves)
    analytic.push_back(l.has_grad() ? l.grad_view() : std::vector<double>(static_cast<std::size_t>(l.numel()), 0.0));

  GradCheckReport rep;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Grid4& leaf = leaves[li];
    double worst = 0.0;
    for (std::int64_t i = 0; i < leaf.numel(); ++i) {
      const double orig = leaf.data()[i];
      leaf.data()[i] = orig + step;
      const double fp = f(nullptr).item();
      leaf.data()[i] = orig - step;
      const double fm = f(nullptr).item();
      leaf.data()[i] = orig;
      const double gn = (fp - fm) / (2.0 * step);
      const double ga = analytic[li][static_cast<std::size_t>(i)];
      const double rel = std::abs(ga - gn) / std::max({std::abs(ga), std::abs(gn), 1.0});
      worst = std::max(worst, rel);
    }
    rep.per_leaf_max_rel.push_back(worst);
    rep.max_rel = std::max(rep.max_rel, worst);
  }
  return rep;
}

}  // namespace mapkd::ops
