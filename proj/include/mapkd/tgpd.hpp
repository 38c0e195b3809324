// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "mapkd/nets.hpp"
#include "mapkd/ops.hpp"

// Token-guided 2D patch distillation. A BEV feature map is cut into patches
// and embedded, a global token summarising the whole map is prepended, and
// single-head self-attention is computed over the sequence. The loss matches
// the student's attention distribution to a reference model's (KL on
// temperature-softened rows) and pulls the token embeddings together (MSE).
// Reference-side token states are built without a tape, so they are
// gradient-detached by construction.

namespace mapkd {

struct TokenState {
  Grid4 patches;   // (B,1,N,D) projected patch embeddings
  Grid4 global;    // (B,1,1,D) projected global token
  Grid4 seq;       // (B,1,N+1,D) [global; patches]
  Grid4 scores;    // (B,1,S,S) scaled pre-softmax attention logits, S = N+1
  Grid4 attn;      // (B,1,S,S) softmax rows of scores
  Grid4 attended;  // (B,1,S,D) attention-weighted values
};

/// Embeds a BEV feature map into the shared token space of the model whose
/// parameters are given (tgpd.* entries of its NetParams).
inline TokenState tokenize(Grid4 f_bev, const NetParams& p, std::int64_t patch_size,
                           Tape* tape = nullptr) {
  const auto s = f_bev.shape();
  if (patch_size < 1 || s[2] % patch_size != 0 || s[3] % patch_size != 0)
    throw ShapeError("tokenize: BEV dims " + shape_str(s) + " not divisible by patch size " +
                     std::to_string(patch_size));
  TokenState t;
  Grid4 raw = ops::patchify(f_bev, patch_size, tape);
  t.patches = ops::linear(raw, p.at("tgpd.patch.w"), p.at("tgpd.patch.b"), tape);
  Grid4 pooled = ops::avg_pool_full(f_bev, tape);                      // (B,C,1,1)
  Grid4 pooled_row = ops::reshape(pooled, {s[0], 1, 1, s[1]}, tape);   // (B,1,1,C)
  t.global = ops::linear(pooled_row, p.at("tgpd.token.w"), p.at("tgpd.token.b"), tape);
  t.seq = ops::concat_rows(t.global, t.patches, tape);
  auto at = ops::scaled_dot_attention(t.seq, p.at("tgpd.wq"), p.at("tgpd.wk"), p.at("tgpd.wv"), tape);
  t.scores = at.scores;
  t.attn = at.attn;
  t.attended = at.out;
  return t;
}

/// KL(softened student attention || softened reference attention), averaged
/// over batch and rows, plus lambda * mean squared error between the token
/// sequences. Softening re-applies softmax to the pre-normalisation
/// attention logits at temperature tau.
inline Grid4 tgpd_pair_loss(const TokenState& stu, const TokenState& ref, double tau,
                            double lambda, Tape* tape = nullptr) {
  if (stu.seq.shape() != ref.seq.shape())
    throw ShapeError("tgpd_pair_loss: token sequences disagree, " + shape_str(stu.seq.shape()) +
                     " vs " + shape_str(ref.seq.shape()));
  const auto ss = stu.scores.shape();
  const double rows = static_cast<double>(ss[0] * ss[1] * ss[2]);
  Grid4 p = ops::softmax_rows(stu.scores, tau, tape);
  Grid4 q = ops::softmax_rows(ref.scores, tau);  // detached
  Grid4 kl_elem = ops::mul(p, ops::sub(ops::log(p, tape), ops::log(q), tape), tape);
  Grid4 kl = ops::scale(ops::sum(kl_elem, tape), 1.0 / rows, tape);
  Grid4 d = ops::sub(stu.seq, ref.seq, tape);
  Grid4 msq = ops::scale(ops::sum(ops::mul(d, d, tape), tape),
                         1.0 / static_cast<double>(stu.seq.numel()), tape);
  return ops::add(kl, ops::scale(msq, lambda, tape), tape);
}

/// beta1 * L(student, teacher) + beta2 * L(student, coach). A zero weight
/// removes that branch from the graph entirely; the corresponding reference
/// may then be null (two-stage mode drops the coach).
inline Grid4 tgpd_total(const TokenState& stu, const TokenState* tea, const TokenState* coa,
                        double beta1, double beta2, double tau, double lambda,
                        Tape* tape = nullptr) {
  if (beta1 != 0.0 && tea == nullptr)
    throw ValueError("tgpd_total: beta1 != 0 requires a teacher token state");
  if (beta2 != 0.0 && coa == nullptr)
    throw ValueError("tgpd_total: beta2 != 0 requires a coach token state");
  Grid4 total;
  if (beta1 != 0.0) total = ops::scale(tgpd_pair_loss(stu, *tea, tau, lambda, tape), beta1, tape);
  if (beta2 != 0.0) {
    Grid4 c = ops::scale(tgpd_pair_loss(stu, *coa, tau, lambda, tape), beta2, tape);
    total = total.valid() ? ops::add(total, c, tape) : c;
  }
  if (!total.valid()) total = Grid4::scalar(0.0);
  return total;
}

}  // namespace mapkd
