// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "mapkd/domain.hpp"
#include "mapkd/ops.hpp"

// Masked semantic response distillation: binary cross-entropy between the
// student's logits and the soft sigmoid probabilities of the references,
// restricted to ground-truth foreground cells. Cells outside the mask can
// never influence the value or the gradient.

namespace mapkd {

/// Per-class foreground mask, a pure function of the ground truth: a cell is
/// selected iff that class's GT is 1 there. An optional dilation radius
/// (4-neighbourhood steps) widens the mask around foreground.
inline Grid4 build_mask(Grid4 gt_sem, std::int64_t dilate_radius = 0) {
  for (double v : gt_sem.values())
    if (v != 0.0 && v != 1.0)
      throw ValueError("build_mask: ground truth entry " + std::to_string(v) + " is not binary");
  Grid4 mask = gt_sem.clone();
  mask.set_requires_grad(false);
  const auto s = mask.shape();
  const std::int64_t H = s[2], W = s[3];
  for (std::int64_t r = 0; r < dilate_radius; ++r) {
    Grid4 prev = mask.clone();
    for (std::int64_t n = 0; n < s[0] * s[1]; ++n) {
      const double* src = prev.data() + n * H * W;
      double* dst = mask.data() + n * H * W;
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
          if (src[y * W + x] == 1.0) continue;
          const bool nb = (y > 0 && src[(y - 1) * W + x] == 1.0) ||
                          (y < H - 1 && src[(y + 1) * W + x] == 1.0) ||
                          (x > 0 && src[y * W + x - 1] == 1.0) ||
                          (x < W - 1 && src[y * W + x + 1] == 1.0);
          if (nb) dst[y * W + x] = 1.0;
        }
    }
  }
  return mask;
}

/// gamma1 * BCE(student, sigmoid(teacher)) + gamma2 * BCE(student,
/// sigmoid(coach)), mean-reduced over masked cells. Reference probabilities
/// are detached. An empty mask is a defined degenerate case: exactly zero
/// loss with zero gradient. A zero gamma removes that branch structurally;
/// coach logits may be omitted when gamma2 == 0.
inline Grid4 msrd_loss(Grid4 student_logits, Grid4 teacher_logits, Grid4 coach_logits, Grid4 mask,
                       double gamma1, double gamma2, Tape* tape = nullptr) {
  check_same_shape(student_logits, mask, "msrd_loss");
  if (gamma1 != 0.0) check_same_shape(teacher_logits, mask, "msrd_loss(teacher)");
  if (gamma2 != 0.0) {
    if (!coach_logits.valid())
      throw ValueError("msrd_loss: gamma2 != 0 requires coach logits");
    check_same_shape(coach_logits, mask, "msrd_loss(coach)");
  }
  bool any = false;
  for (double v : mask.values())
    if (v == 1.0) {
      any = true;
      break;
    }
  if (!any) return Grid4::scalar(0.0);

  Grid4 stu = ops::masked_select(student_logits, mask, tape);
  Grid4 total;
  if (gamma1 != 0.0) {
    Grid4 p_t = ops::sigmoid(ops::masked_select(teacher_logits, mask));  // detached
    total = ops::scale(ops::mean(ops::bce_with_logits(stu, p_t, tape), tape), gamma1, tape);
  }
  if (gamma2 != 0.0) {
    Grid4 p_c = ops::sigmoid(ops::masked_select(coach_logits, mask));  // detached
    Grid4 term = ops::scale(ops::mean(ops::bce_with_logits(stu, p_c, tape), tape), gamma2, tape);
    total = total.valid() ? ops::add(total, term, tape) : term;
  }
  if (!total.valid()) total = Grid4::scalar(0.0);
  return total;
}

}  // namespace mapkd
