// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mapkd/msrd.hpp"
#include "mapkd/nets.hpp"
#include "mapkd/scenegen.hpp"
#include "mapkd/tgpd.hpp"

// Supervised losses, the total objective, the Adam optimizer, and the
// two-phase procedure: joint teacher/coach pretraining on their own
// pipelines, then student distillation against frozen references. A loss
// term with weight zero is skipped structurally, never multiplied in, so
// disabling a term is bit-equivalent to removing it from the graph.

namespace mapkd {

class DivergenceError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double alpha1 = 0.1;  // instance-embedding weight
  double alpha2 = 0.1;  // direction weight (labels absent; term is 0)
  double lambda1 = 0.5; // BEV-level (TGPD) weight
  double lambda2 = 0.5; // output-level (MSRD) weight
  double beta1 = 0.6, beta2 = 0.4;
  double gamma1 = 0.7, gamma2 = 0.3;
  double tau = 1.0;
  double lambda_mse = 1.0;
  std::int64_t msrd_dilate = 0;

  void validate() const {
    for (double v : {alpha1, alpha2, lambda1, lambda2, beta1, beta2, gamma1, gamma2, lambda_mse})
      if (v < 0.0) throw ValueError("LossWeights: negative weight");
    if (!(tau > 0.0)) throw ValueError("LossWeights: tau must be positive");
    if (msrd_dilate < 0) throw ValueError("LossWeights: negative msrd_dilate");
  }

  bool tgpd_active() const { return lambda1 > 0.0 && (beta1 > 0.0 || beta2 > 0.0); }
  bool msrd_active() const { return lambda2 > 0.0 && (gamma1 > 0.0 || gamma2 > 0.0); }
  bool needs_teacher() const {
    return (tgpd_active() && beta1 > 0.0) || (msrd_active() && gamma1 > 0.0);
  }
  bool needs_coach() const {
    return (tgpd_active() && beta2 > 0.0) || (msrd_active() && gamma2 > 0.0);
  }
};

struct TrainConfig {
  std::int64_t pretrain_epochs = 30;
  std::int64_t distill_epochs = 10;
  std::int64_t batch_size = 8;
  double lr = 5e-4;
  double weight_decay = 1e-7;
  double grad_clip = 5.0;
  std::int64_t eval_every = 1;  // epochs between val evaluations; 0 disables
  bool cache_refs = false;      // frozen references make per-sample caching valid
  bool coach_lidar_pull = false;
  double coach_lidar_pull_weight = 0.1;

  void validate() const {
    if (pretrain_epochs < 0 || distill_epochs < 0) throw ValueError("TrainConfig: negative epochs");
    if (batch_size < 1) throw ValueError("TrainConfig: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ValueError("TrainConfig: lr must be positive");
    if (weight_decay < 0.0 || grad_clip <= 0.0 || eval_every < 0 || coach_lidar_pull_weight < 0.0)
      throw ValueError("TrainConfig: invalid optimizer setting");
  }
};

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

struct Batch {
  Grid4 cam, lidar, sd, hd, gt_sem;
  std::vector<const SceneSample*> samples;  // row-aligned, for gt_inst
};

inline Batch make_batch(const std::vector<SceneSample>& data, const std::vector<std::size_t>& order,
                        std::size_t begin, std::size_t end) {
  const auto n = static_cast<std::int64_t>(end - begin);
  if (n <= 0) throw ValueError("make_batch: empty index range");
  auto stack = [&](auto pick) {
    const Grid4& first = pick(data[order[begin]]);
    if (!first.valid()) throw ValueError("make_batch: sample is missing a modality view");
    Shape4 s = first.shape();
    Grid4 out(Shape4{n, s[1], s[2], s[3]});
    for (std::int64_t i = 0; i < n; ++i) {
      const Grid4& g = pick(data[order[begin + static_cast<std::size_t>(i)]]);
      std::copy_n(g.data(), g.numel(), out.data() + i * g.numel());
    }
    return out;
  };
  Batch b;
  b.cam = stack([](const SceneSample& s) -> const Grid4& { return s.cam_view; });
  b.lidar = stack([](const SceneSample& s) -> const Grid4& { return s.lidar_view; });
  b.sd = stack([](const SceneSample& s) -> const Grid4& { return s.sd_prior; });
  b.hd = stack([](const SceneSample& s) -> const Grid4& { return s.hd_noisy; });
  b.gt_sem = stack([](const SceneSample& s) -> const Grid4& { return s.gt_sem; });
  for (std::size_t i = begin; i < end; ++i) b.samples.push_back(&data[order[i]]);
  return b;
}

/// Dispatch a forward pass for whatever role the parameters carry. The
/// teacher/coach consume the noisy HD prior in every phase; it is the only
/// HD view the data carries, standing in for a stale offline map.
inline ForwardOut forward_role(const NetParams& p, const Batch& b, Tape* tape = nullptr) {
  switch (p.role()) {
    case Role::Student: return student_forward(p, b.cam, tape);
    case Role::Teacher: return teacher_forward(p, b.cam, b.lidar, b.sd, b.hd, tape);
    case Role::Coach: return coach_forward(p, b.cam, b.sd, b.hd, tape);
  }
  throw ValueError("forward_role: bad role");
}

// ---------------------------------------------------------------------------
// supervised losses
// ---------------------------------------------------------------------------

inline constexpr double kPullMargin = 0.5;
inline constexpr double kPushMargin = 3.0;

/// Discriminative instance-embedding loss: pull each cell's embedding
/// toward its instance mean, push distinct instance means apart.
inline Grid4 instance_embedding_loss(Grid4 emb, const Batch& batch, Tape* tape = nullptr) {
  const auto es = emb.shape();
  const std::int64_t B = es[0], De = es[1], H = es[2], W = es[3];
  if (batch.gt_sem.dim(2) != H || batch.gt_sem.dim(3) != W)
    throw ShapeError("instance_embedding_loss: embedding " + shape_str(es) +
                     " does not match gt " + shape_str(batch.gt_sem.shape()));
  Grid4 total;
  for (std::int64_t b = 0; b < B; ++b) {
    Grid4 e_b = ops::slice_batch(emb, b, tape);
    const SceneSample& smp = *batch.samples[static_cast<std::size_t>(b)];
    std::vector<Grid4> means;
    Grid4 pull_sum;
    for (int c = 0; c < kNumClasses; ++c) {
      const std::int32_t* inst = smp.gt_inst.data() + c * H * W;
      std::int32_t nk = 0;
      for (std::int64_t i = 0; i < H * W; ++i) nk = std::max(nk, inst[i]);
      for (std::int32_t k = 1; k <= nk; ++k) {
        Grid4 mask(Shape4{1, De, H, W});
        std::int64_t cells = 0;
        for (std::int64_t i = 0; i < H * W; ++i)
          if (inst[i] == k) {
            ++cells;
            for (std::int64_t d = 0; d < De; ++d) mask.data()[d * H * W + i] = 1.0;
          }
        if (cells == 0) continue;
        Grid4 sel = ops::reshape(ops::masked_select(e_b, mask, tape), {1, 1, De, cells}, tape);
        Grid4 mu = ops::row_mean(sel, tape);  // (1,1,De,1)
        Grid4 ones(Shape4{1, 1, 1, cells}, 1.0);
        Grid4 diff = ops::sub(sel, ops::matmul_bc(mu, ones, false, tape), tape);
        Grid4 sq = ops::mul(diff, diff, tape);
        Grid4 ssum = ops::scale(ops::row_mean(ops::permute(sq, {0, 1, 3, 2}, tape), tape),
                                static_cast<double>(De), tape);
        Grid4 dist = ops::sqrt(ops::add_scalar(ssum, 1e-12, tape), tape);
        Grid4 hinge = ops::relu(ops::add_scalar(dist, -kPullMargin, tape), tape);
        Grid4 pull_k = ops::mean(ops::mul(hinge, hinge, tape), tape);
        pull_sum = pull_sum.valid() ? ops::add(pull_sum, pull_k, tape) : pull_k;
        means.push_back(mu);
      }
    }
    const auto K = static_cast<std::int64_t>(means.size());
    Grid4 sample_loss;
    if (pull_sum.valid())
      sample_loss = ops::scale(pull_sum, 1.0 / static_cast<double>(K), tape);
    if (K >= 2) {
      Grid4 push_sum;
      for (std::int64_t a = 0; a < K; ++a)
        for (std::int64_t b2 = a + 1; b2 < K; ++b2) {
          Grid4 d = ops::sub(means[static_cast<std::size_t>(a)], means[static_cast<std::size_t>(b2)], tape);
          Grid4 ssum = ops::scale(
              ops::row_mean(ops::permute(ops::mul(d, d, tape), {0, 1, 3, 2}, tape), tape),
              static_cast<double>(De), tape);
          Grid4 dist = ops::sqrt(ops::add_scalar(ssum, 1e-12, tape), tape);
          Grid4 hinge = ops::relu(ops::scale(ops::add_scalar(dist, -kPushMargin, tape), -1.0, tape), tape);
          Grid4 term = ops::mul(hinge, hinge, tape);
          push_sum = push_sum.valid() ? ops::add(push_sum, term, tape) : term;
        }
      Grid4 push = ops::scale(push_sum, 2.0 / static_cast<double>(K * (K - 1)), tape);
      push = ops::reshape(push, {1, 1, 1, 1}, tape);
      sample_loss = sample_loss.valid() ? ops::add(sample_loss, push, tape) : push;
    }
    if (sample_loss.valid()) total = total.valid() ? ops::add(total, sample_loss, tape) : sample_loss;
  }
  if (!total.valid()) return Grid4::scalar(0.0);
  return ops::scale(total, 1.0 / static_cast<double>(B), tape);
}

struct BaseLossParts {
  double seg = 0.0, dist = 0.0, dir = 0.0;
};

/// L_seg + alpha1 * L_dist + alpha2 * L_dir. Direction labels do not exist
/// in the synthetic data, so L_dir is identically zero (plumbing kept).
inline Grid4 base_loss(const ForwardOut& out, const Batch& batch, const LossWeights& w,
                       Tape* tape = nullptr, BaseLossParts* parts = nullptr) {
  check_same_shape(out.logits, batch.gt_sem, "base_loss");
  Grid4 seg = ops::mean(ops::bce_with_logits(out.logits, batch.gt_sem, tape), tape);
  Grid4 total = seg;
  double dist_v = 0.0;
  if (w.alpha1 > 0.0) {
    Grid4 dist = instance_embedding_loss(out.inst_emb, batch, tape);
    dist_v = dist.item();
    total = ops::add(total, ops::scale(dist, w.alpha1, tape), tape);
  }
  if (parts) *parts = BaseLossParts{seg.item(), dist_v, 0.0};
  return total;
}

struct LossBreakdown {
  double total = 0.0, base = 0.0, bev = 0.0, output = 0.0;
  BaseLossParts base_parts;
};

/// L_base + lambda1 * L_bev(TGPD) + lambda2 * L_output(MSRD), with itemised
/// scalars for logging. Reference outputs must come from tape-less forwards
/// of frozen models.
inline Grid4 total_loss(const NetParams& student, const ForwardOut& stu, const NetParams* p_tea,
                        const ForwardOut* tea, const NetParams* p_coa, const ForwardOut* coa,
                        const Batch& batch, const LossWeights& w, Tape* tape = nullptr,
                        LossBreakdown* bd = nullptr) {
  BaseLossParts bparts;
  Grid4 total = base_loss(stu, batch, w, tape, &bparts);
  const double base_v = total.item();
  double bev_v = 0.0, out_v = 0.0;
  if (w.tgpd_active()) {
    TokenState st = tokenize(stu.bev, student, kPatchSize, tape);
    std::optional<TokenState> tt, tc;
    if (w.beta1 > 0.0) {
      if (!p_tea || !tea) throw ValueError("total_loss: beta1 > 0 requires teacher outputs");
      tt = tokenize(tea->bev, *p_tea, kPatchSize);  // detached
    }
    if (w.beta2 > 0.0) {
      if (!p_coa || !coa) throw ValueError("total_loss: beta2 > 0 requires coach outputs");
      tc = tokenize(coa->bev, *p_coa, kPatchSize);  // detached
    }
    Grid4 bev = tgpd_total(st, tt ? &*tt : nullptr, tc ? &*tc : nullptr, w.beta1, w.beta2, w.tau,
                           w.lambda_mse, tape);
    bev_v = bev.item();
    total = ops::add(total, ops::scale(bev, w.lambda1, tape), tape);
  }
  if (w.msrd_active()) {
    if (w.gamma1 > 0.0 && !tea) throw ValueError("total_loss: gamma1 > 0 requires teacher outputs");
    if (w.gamma2 > 0.0 && !coa) throw ValueError("total_loss: gamma2 > 0 requires coach outputs");
    Grid4 mask = build_mask(batch.gt_sem, w.msrd_dilate);
    Grid4 out = msrd_loss(stu.logits, tea ? tea->logits : Grid4{}, coa ? coa->logits : Grid4{},
                          mask, w.gamma1, w.gamma2, tape);
    out_v = out.item();
    total = ops::add(total, ops::scale(out, w.lambda2, tape), tape);
  }
  if (bd) *bd = LossBreakdown{total.item(), base_v, bev_v, out_v, bparts};
  return total;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t t = 0;

  static AdamState for_params(const NetParams& p) {
    AdamState s;
    for (const auto& [name, g] : p.items()) {
      s.m.emplace_back(static_cast<std::size_t>(g.numel()), 0.0);
      s.v.emplace_back(static_cast<std::size_t>(g.numel()), 0.0);
    }
    return s;
  }
};

/// Global-norm clip at cfg.grad_clip, then Adam (0.9/0.999, eps 1e-8) with
/// decoupled weight decay. Returns the clip scale that was applied.
inline double optimizer_step(NetParams& params, AdamState& st, const TrainConfig& cfg) {
  if (params.frozen()) throw std::logic_error("optimizer_step: params are frozen");
  if (st.m.size() != params.items().size())
    throw ShapeError("optimizer_step: state/param mismatch");
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  double sq = 0.0;
  for (const auto& [name, g] : params.items())
    if (g.has_grad())
      for (double gv : g.grad_view()) sq += gv * gv;
  const double norm = std::sqrt(sq);
  const double scale = norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
  st.t += 1;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.items().size(); ++i) {
    Grid4& p = params.items()[i].second;
    if (static_cast<std::int64_t>(st.m[i].size()) != p.numel())
      throw ShapeError("optimizer_step: state shape mismatch for " + params.items()[i].first);
    const bool has = p.has_grad();
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      const double g = has ? p.grad_view()[static_cast<std::size_t>(j)] * scale : 0.0;
      auto ju = static_cast<std::size_t>(j);
      st.m[i][ju] = kBeta1 * st.m[i][ju] + (1.0 - kBeta1) * g;
      st.v[i][ju] = kBeta2 * st.v[i][ju] + (1.0 - kBeta2) * g * g;
      if (cfg.weight_decay > 0.0) p.data()[j] -= cfg.lr * cfg.weight_decay * p.data()[j];
      p.data()[j] -= cfg.lr * (st.m[i][ju] / bc1) / (std::sqrt(st.v[i][ju] / bc2) + kEps);
    }
  }
  return scale;
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

struct TrainLogRow {
  std::int64_t epoch = 0, step = 0;
  double l_total = 0.0, l_base = 0.0, l_bev = 0.0, l_output = 0.0;
  bool has_metrics = false;
  double miou_val = 0.0, map_val = 0.0;
};

using EvalFn = std::function<std::pair<double, double>(const NetParams&)>;

inline void write_metric_log(const std::vector<TrainLogRow>& rows,
                             const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (!f) throw std::runtime_error("write_metric_log: cannot open " + path.string());
  std::fputs("epoch,step,l_total,l_base,l_bev,l_output,miou_val,map_val\n", f);
  for (const auto& r : rows) {
    std::fprintf(f, "%lld,%lld,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.epoch),
                 static_cast<long long>(r.step), r.l_total, r.l_base, r.l_bev, r.l_output);
    if (r.has_metrics)
      std::fprintf(f, ",%.9g,%.9g\n", r.miou_val, r.map_val);
    else
      std::fputs(",,\n", f);
  }
  std::fclose(f);
}

namespace trainer_detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

inline void check_finite(const Grid4& loss, const char* phase) {
  if (!std::isfinite(loss.item()))
    throw DivergenceError(std::string(phase) + ": loss became non-finite, aborting");
}

inline Grid4 detach(const Grid4& g) {
  Grid4 c = g.clone();
  c.set_requires_grad(false);
  return c;
}

}  // namespace trainer_detail

struct PretrainResult {
  NetParams teacher, coach;
  std::vector<TrainLogRow> teacher_log, coach_log;
};

/// Phase one: teacher and coach trained jointly (same loop, separate
/// parameters and optimizers) with the base loss on their own pipelines.
/// The HD input is the noisy HD view: pretraining supervises recovering
/// clean structure from a corrupted prior. Returns both models frozen.
inline PretrainResult pretrain_teacher_coach(const std::vector<SceneSample>& train,
                                             const TrainConfig& cfg, const LossWeights& w,
                                             std::uint64_t seed,
                                             const std::filesystem::path& ckpt_dir = {}) {
  cfg.validate();
  w.validate();
  if (train.empty()) throw ValueError("pretrain_teacher_coach: empty dataset");
  PretrainResult r;
  r.teacher = init_params(Role::Teacher, derive_seed(seed, "init-teacher"));
  r.coach = init_params(Role::Coach, derive_seed(seed, "init-coach"));
  AdamState st_t = AdamState::for_params(r.teacher);
  AdamState st_c = AdamState::for_params(r.coach);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::int64_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    auto order = trainer_detail::shuffled_indices(
        train.size(), derive_seed(seed, "pretrain-order", static_cast<std::uint64_t>(epoch)));
    std::int64_t step = 0;
    for (std::size_t at = 0; at < train.size(); at += bs, ++step) {
      Batch b = make_batch(train, order, at, std::min(train.size(), at + bs));

      Tape tape_t;
      r.teacher.zero_grad();
      ForwardOut to = forward_role(r.teacher, b, &tape_t);
      BaseLossParts tp;
      Grid4 tl = base_loss(to, b, w, &tape_t, &tp);
      trainer_detail::check_finite(tl, "pretrain(teacher)");
      tape_t.backward(tl);
      optimizer_step(r.teacher, st_t, cfg);
      r.teacher_log.push_back({epoch, step, tl.item(), tl.item(), 0.0, 0.0, false, 0.0, 0.0});

      Tape tape_c;
      r.coach.zero_grad();
      ForwardOut co = forward_role(r.coach, b, &tape_c);
      BaseLossParts cp;
      Grid4 cl = base_loss(co, b, w, &tape_c, &cp);
      if (cfg.coach_lidar_pull) {
        Grid4 target = trainer_detail::detach(to.lidar_feat);
        Grid4 pull = ops::mse(co.lidar_feat, target, &tape_c);
        cl = ops::add(cl, ops::scale(pull, cfg.coach_lidar_pull_weight, &tape_c), &tape_c);
      }
      trainer_detail::check_finite(cl, "pretrain(coach)");
      tape_c.backward(cl);
      optimizer_step(r.coach, st_c, cfg);
      r.coach_log.push_back({epoch, step, cl.item(), cl.item(), 0.0, 0.0, false, 0.0, 0.0});
    }
    if (!ckpt_dir.empty()) {
      save_params(r.teacher, ckpt_dir / "teacher.ckpt");
      save_params(r.coach, ckpt_dir / "coach.ckpt");
    }
  }
  r.teacher.freeze();
  r.coach.freeze();
  if (!ckpt_dir.empty()) {
    save_params(r.teacher, ckpt_dir / "teacher.ckpt");
    save_params(r.coach, ckpt_dir / "coach.ckpt");
  }
  return r;
}

/// Per-sample cached reference outputs; valid because the references are
/// frozen. Batched re-forwards and stacked cached slices are bit-identical
/// here since every op treats batch rows independently.
struct RefCache {
  std::vector<Grid4> bev, logits;

  static RefCache build(const NetParams& p, const std::vector<SceneSample>& data) {
    RefCache c;
    c.bev.reserve(data.size());
    c.logits.reserve(data.size());
    std::vector<std::size_t> one{0};
    for (std::size_t i = 0; i < data.size(); ++i) {
      one[0] = i;
      Batch b = make_batch(data, one, 0, 1);
      ForwardOut o = forward_role(p, b);
      c.bev.push_back(o.bev);
      c.logits.push_back(o.logits);
    }
    return c;
  }

  ForwardOut stacked(const std::vector<std::size_t>& order, std::size_t begin,
                     std::size_t end) const {
    const auto n = static_cast<std::int64_t>(end - begin);
    auto stack = [&](const std::vector<Grid4>& src) {
      Shape4 s = src[order[begin]].shape();
      Grid4 out(Shape4{n, s[1], s[2], s[3]});
      for (std::int64_t i = 0; i < n; ++i) {
        const Grid4& g = src[order[begin + static_cast<std::size_t>(i)]];
        std::copy_n(g.data(), g.numel(), out.data() + i * g.numel());
      }
      return out;
    };
    ForwardOut o;
    o.bev = stack(bev);
    o.logits = stack(logits);
    return o;
  }
};

/// Phase two: the student trains from scratch under the total objective.
/// References are forwarded without a tape (gradient-free); an assertion
/// verifies no reference parameter ever accumulates a gradient. With
/// lambda1 = lambda2 = 0 this runs the pure supervised path, bit-identical
/// to train_student_supervised.
inline NetParams distill_student(const std::vector<SceneSample>& train, const NetParams& teacher,
                                 const NetParams* coach, const TrainConfig& cfg,
                                 const LossWeights& w, std::uint64_t seed,
                                 std::vector<TrainLogRow>* log = nullptr,
                                 const EvalFn& eval_fn = {}) {
  cfg.validate();
  w.validate();
  if (train.empty()) throw ValueError("distill_student: empty dataset");
  const bool use_tea = w.needs_teacher();
  const bool use_coa = w.needs_coach();
  if (use_tea && !teacher.frozen())
    throw std::logic_error("distill_student: teacher must be frozen");
  if (use_coa && (coach == nullptr || !coach->frozen()))
    throw std::logic_error("distill_student: coach must be present and frozen");

  NetParams student = init_params(Role::Student, derive_seed(seed, "init-student"));
  AdamState st = AdamState::for_params(student);

  RefCache cache_t, cache_c;
  if (cfg.cache_refs && use_tea) cache_t = RefCache::build(teacher, train);
  if (cfg.cache_refs && use_coa) cache_c = RefCache::build(*coach, train);

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::int64_t epoch = 0; epoch < cfg.distill_epochs; ++epoch) {
    auto order = trainer_detail::shuffled_indices(
        train.size(), derive_seed(seed, "distill-order", static_cast<std::uint64_t>(epoch)));
    std::int64_t step = 0;
    for (std::size_t at = 0; at < train.size(); at += bs, ++step) {
      const std::size_t hi = std::min(train.size(), at + bs);
      Batch b = make_batch(train, order, at, hi);
      Tape tape;
      student.zero_grad();
      ForwardOut so = student_forward(student, b.cam, &tape);
      ForwardOut to, co;
      if (use_tea) to = cfg.cache_refs ? cache_t.stacked(order, at, hi) : forward_role(teacher, b);
      if (use_coa) co = cfg.cache_refs ? cache_c.stacked(order, at, hi) : forward_role(*coach, b);
      LossBreakdown bd;
      Grid4 loss = total_loss(student, so, use_tea ? &teacher : nullptr, use_tea ? &to : nullptr,
                              use_coa ? coach : nullptr, use_coa ? &co : nullptr, b, w, &tape, &bd);
      trainer_detail::check_finite(loss, "distill");
      tape.backward(loss);
      for (const auto& [name, g] : teacher.items())
        if (g.has_grad()) throw std::logic_error("distill_student: teacher received a gradient");
      if (coach)
        for (const auto& [name, g] : coach->items())
          if (g.has_grad()) throw std::logic_error("distill_student: coach received a gradient");
      optimizer_step(student, st, cfg);
      if (log) log->push_back({epoch, step, bd.total, bd.base, bd.bev, bd.output, false, 0.0, 0.0});
    }
    if (log && eval_fn && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 &&
        !log->empty()) {
      auto [miou, map] = eval_fn(student);
      log->back().has_metrics = true;
      log->back().miou_val = miou;
      log->back().map_val = map;
    }
  }
  return student;
}

/// Independent no-distillation trainer: same seeds, same data order, same
/// optimizer, base loss only. This is the baseline the zero-weight
/// equivalence criterion compares against.
inline NetParams train_student_supervised(const std::vector<SceneSample>& train,
                                          const TrainConfig& cfg, const LossWeights& w,
                                          std::uint64_t seed,
                                          std::vector<TrainLogRow>* log = nullptr,
                                          const EvalFn& eval_fn = {}) {
  cfg.validate();
  w.validate();
  if (train.empty()) throw ValueError("train_student_supervised: empty dataset");
  NetParams student = init_params(Role::Student, derive_seed(seed, "init-student"));
  AdamState st = AdamState::for_params(student);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::int64_t epoch = 0; epoch < cfg.distill_epochs; ++epoch) {
    auto order = trainer_detail::shuffled_indices(
        train.size(), derive_seed(seed, "distill-order", static_cast<std::uint64_t>(epoch)));
    std::int64_t step = 0;
    for (std::size_t at = 0; at < train.size(); at += bs, ++step) {
      Batch b = make_batch(train, order, at, std::min(train.size(), at + bs));
      Tape tape;
      student.zero_grad();
      ForwardOut so = student_forward(student, b.cam, &tape);
      BaseLossParts parts;
      Grid4 loss = base_loss(so, b, w, &tape, &parts);
      trainer_detail::check_finite(loss, "supervised");
      tape.backward(loss);
      optimizer_step(student, st, cfg);
      if (log)
        log->push_back({epoch, step, loss.item(), loss.item(), 0.0, 0.0, false, 0.0, 0.0});
    }
    if (log && eval_fn && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 &&
        !log->empty()) {
      auto [miou, map] = eval_fn(student);
      log->back().has_metrics = true;
      log->back().miou_val = miou;
      log->back().map_val = map;
    }
  }
  return student;
}

}  // namespace mapkd
