// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mapkd/container.hpp"
#include "mapkd/domain.hpp"
#include "mapkd/grid4.hpp"
#include "mapkd/ops.hpp"
#include "mapkd/rng.hpp"

// Teacher / coach / student networks. All three share the same stage layout
// (encoders -> BEV projection -> prior fusion -> semantic decoder) at
// different widths; the BEV-stage widths 16/24/32 enforce the capacity
// ordering student < coach < teacher. All BEV features live at half the
// input resolution so the token sequences compared by the feature loss
// align across models.

namespace mapkd {

enum class Role { Teacher, Coach, Student };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::Teacher: return "teacher";
    case Role::Coach: return "coach";
    case Role::Student: return "student";
  }
  return "?";
}

inline Role role_from_name(const std::string& s) {
  if (s == "teacher") return Role::Teacher;
  if (s == "coach") return Role::Coach;
  if (s == "student") return Role::Student;
  throw ValueError("unknown role: " + s);
}

// BEV-stage channel widths and shared token-head dimensions.
inline constexpr std::int64_t kStudentBev = 16;
inline constexpr std::int64_t kCoachBev = 24;
inline constexpr std::int64_t kTeacherBev = 32;
inline constexpr std::int64_t kEmbedDim = 32;   // shared TGPD embedding width D
inline constexpr std::int64_t kPatchSize = 4;   // TGPD patch side s
inline constexpr std::int64_t kInstEmbDim = 4;  // instance-embedding head width

/// Ordered, named parameter store for one network.
class NetParams {
  std::vector<std::pair<std::string, Grid4>> items_;
  std::unordered_map<std::string, std::size_t> index_;
  Role role_ = Role::Student;
  bool frozen_ = false;

public:
  NetParams() = default;
  explicit NetParams(Role r) : role_(r) {}

  Role role() const { return role_; }
  bool frozen() const { return frozen_; }

  void add(const std::string& name, Grid4 g) {
    if (index_.count(name)) throw ValueError("NetParams: duplicate parameter " + name);
    g.set_requires_grad(!frozen_);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(g));
  }

  Grid4& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("NetParams: no parameter named " + name);
    return items_[it->second].second;
  }
  const Grid4& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("NetParams: no parameter named " + name);
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, Grid4>>& items() const { return items_; }
  std::vector<std::pair<std::string, Grid4>>& items() { return items_; }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, g] : items_) n += g.numel();
    return n;
  }

  void freeze() {
    frozen_ = true;
    for (auto& [name, g] : items_) {
      g.set_requires_grad(false);
      g.drop_grad();
    }
  }
  void thaw() {
    frozen_ = false;
    for (auto& [name, g] : items_) g.set_requires_grad(true);
  }
  void zero_grad() {
    for (auto& [name, g] : items_) g.zero_grad();
  }

  /// CRC over names and raw value bytes; used for frozen-reference and
  /// run-isolation checks.
  std::uint32_t checksum() const {
    std::uint32_t crc = 0;
    for (const auto& [name, g] : items_) {
      crc = container::crc32_update(crc, reinterpret_cast<const std::uint8_t*>(name.data()),
                                    name.size());
      crc = container::crc32_update(crc, reinterpret_cast<const std::uint8_t*>(g.data()),
                                    static_cast<std::size_t>(g.numel()) * sizeof(double));
    }
    return crc;
  }
};

namespace nets_detail {

inline Grid4 kaiming(Shape4 s, std::int64_t fan_in, Rng& rng) {
  Grid4 g(s);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < g.numel(); ++i) g.data()[i] = rng.normal(0.0, std);
  return g;
}

inline void add_conv(NetParams& p, const std::string& name, std::int64_t oc, std::int64_t ic,
                     std::int64_t k, Rng& rng, bool zero_init = false) {
  Grid4 w = zero_init ? Grid4(Shape4{oc, ic, k, k}) : kaiming({oc, ic, k, k}, ic * k * k, rng);
  p.add(name + ".w", std::move(w));
  p.add(name + ".b", Grid4(1, oc, 1, 1));
}

inline void add_linear(NetParams& p, const std::string& name, std::int64_t dout, std::int64_t din,
                       Rng& rng, bool bias = true) {
  p.add(name + ".w", kaiming({1, 1, dout, din}, din, rng));
  if (bias) p.add(name + ".b", Grid4(1, 1, 1, dout));
}

/// Patch projection plus a token projection tied to it at init: summing the
/// patch weights per channel makes the global token of a constant feature
/// coincide exactly with its patch embeddings (and the column sums of a
/// Kaiming(C*s*s) matrix are distributed as Kaiming(C), so the scale is
/// right too). The two stay independently trainable afterwards.
inline void add_token_heads(NetParams& p, std::int64_t embed_dim, std::int64_t channels,
                            std::int64_t patch_cells, Rng& rng) {
  add_linear(p, "tgpd.patch", embed_dim, channels * patch_cells, rng);
  const Grid4& pw = p.at("tgpd.patch.w");
  Grid4 tw(Shape4{1, 1, embed_dim, channels});
  for (std::int64_t d = 0; d < embed_dim; ++d)
    for (std::int64_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < patch_cells; ++k)
        acc += pw.values()[static_cast<std::size_t>(d * channels * patch_cells + c * patch_cells + k)];
      tw.at(0, 0, d, c) = acc;
    }
  p.add("tgpd.token.w", std::move(tw));
  p.add("tgpd.token.b", Grid4(1, 1, 1, embed_dim));
}

}  // namespace nets_detail

/// Builds the parameter set for a role. The semantic head is zero-initialised
/// so a fresh network predicts probability 0.5 everywhere. The three token
/// projections (patch/token) are per-role since their input widths differ;
/// the Q/K/V attention projections are drawn from one fixed stream shared by
/// all roles so the three attention spaces start out directly comparable.
inline NetParams init_params(Role role, std::uint64_t seed) {
  using nets_detail::add_conv;
  NetParams p(role);
  Rng rng(derive_seed(seed, "init", static_cast<std::uint64_t>(role)));
  const std::int64_t ps2 = kPatchSize * kPatchSize;
  switch (role) {
    case Role::Student:
      add_conv(p, "enc1", 8, kCamChannels, 3, rng);
      add_conv(p, "enc2", 12, 8, 3, rng);
      add_conv(p, "enc3", kStudentBev, 12, 3, rng);
      add_conv(p, "bevproj", kStudentBev, kStudentBev, 3, rng);
      add_conv(p, "dec1", 12, kStudentBev, 3, rng);
      add_conv(p, "sem", kNumClasses, 12, 3, rng, /*zero_init=*/true);
      add_conv(p, "emb", kInstEmbDim, 12, 1, rng);
      nets_detail::add_token_heads(p, kEmbedDim, kStudentBev, ps2, rng);
      break;
    case Role::Coach:
      add_conv(p, "enc2d1", 10, kCamChannels, 3, rng);
      add_conv(p, "enc2d2", 12, 10, 3, rng);
      add_conv(p, "enc3d1", 12, kCamChannels, 3, rng);
      add_conv(p, "enc3d2", 16, 12, 3, rng);
      add_conv(p, "bevproj", kCoachBev, 12 + 16, 3, rng);
      add_conv(p, "sdfuse", kCoachBev, kCoachBev + 1, 1, rng);
      add_conv(p, "hdfuse", kCoachBev, kCoachBev + kNumClasses, 1, rng);
      add_conv(p, "dec1", 12, kCoachBev, 3, rng);
      add_conv(p, "sem", kNumClasses, 12, 3, rng, /*zero_init=*/true);
      add_conv(p, "emb", kInstEmbDim, 12, 1, rng);
      nets_detail::add_token_heads(p, kEmbedDim, kCoachBev, ps2, rng);
      break;
    case Role::Teacher:
      add_conv(p, "img1", 12, kCamChannels, 3, rng);
      add_conv(p, "img2", 16, 12, 3, rng);
      add_conv(p, "lid1", 12, kLidarChannels, 3, rng);
      add_conv(p, "lid2", 16, 12, 3, rng);
      add_conv(p, "bevproj", kTeacherBev, 16 + 16, 3, rng);
      add_conv(p, "sdfuse", kTeacherBev, kTeacherBev + 1, 1, rng);
      add_conv(p, "hdfuse", kTeacherBev, kTeacherBev + kNumClasses, 1, rng);
      add_conv(p, "dec1", 16, kTeacherBev, 3, rng);
      add_conv(p, "sem", kNumClasses, 16, 3, rng, /*zero_init=*/true);
      add_conv(p, "emb", kInstEmbDim, 16, 1, rng);
      nets_detail::add_token_heads(p, kEmbedDim, kTeacherBev, ps2, rng);
      break;
  }
  Rng qkv(derive_seed(0x746770645f716b76ULL, "tgpd-qkv-shared"));
  p.add("tgpd.wq", nets_detail::kaiming({1, 1, kEmbedDim, kEmbedDim}, kEmbedDim, qkv));
  p.add("tgpd.wk", nets_detail::kaiming({1, 1, kEmbedDim, kEmbedDim}, kEmbedDim, qkv));
  p.add("tgpd.wv", nets_detail::kaiming({1, 1, kEmbedDim, kEmbedDim}, kEmbedDim, qkv));
  return p;
}

struct ForwardOut {
  Grid4 bev;         // distillation feature, (B, C_bev, H/2, W/2)
  Grid4 logits;      // (B, 3, H, W)
  Grid4 inst_emb;    // (B, kInstEmbDim, H, W)
  Grid4 lidar_feat;  // teacher: Enc_lidar out; coach: Enc_3D out; student: invalid
};

namespace nets_detail {

inline void check_role(const NetParams& p, Role expect, const char* fn) {
  if (p.role() != expect)
    throw ValueError(std::string(fn) + ": wrong role " + role_name(p.role()) + ", expected " +
                     role_name(expect));
}

inline void check_input(const Grid4& g, std::int64_t channels, const char* what) {
  if (!g.valid()) throw ValueError(std::string("missing modality input: ") + what);
  if (g.dim(1) != channels)
    throw ShapeError(std::string(what) + ": expected " + std::to_string(channels) +
                     " channels, got shape " + shape_str(g.shape()));
}

inline Grid4 conv_block(const NetParams& p, const std::string& name, Grid4 x, std::int64_t stride,
                        std::int64_t pad, Tape* tape) {
  return ops::relu(ops::conv2d(x, p.at(name + ".w"), p.at(name + ".b"), stride, pad, tape), tape);
}

/// Shared tail: decoder conv, 2x nearest upsample, semantic + embedding heads.
inline void decode(const NetParams& p, Grid4 bev, ForwardOut& out, Tape* tape) {
  Grid4 d = conv_block(p, "dec1", bev, 1, 1, tape);
  Grid4 u = ops::upsample_nearest(d, 2, tape);
  out.logits = ops::conv2d(u, p.at("sem.w"), p.at("sem.b"), 1, 1, tape);
  out.inst_emb = ops::conv2d(u, p.at("emb.w"), p.at("emb.b"), 1, 0, tape);
}

/// Prior fusion shared by teacher and coach: upsample the SD prior to BEV
/// resolution, 1x1 fuse, then pool the HD prior down and 1x1 fuse again.
inline Grid4 fuse_priors(const NetParams& p, Grid4 bev0, Grid4 sd, Grid4 hd, Tape* tape) {
  const std::int64_t bh = bev0.dim(2), bw = bev0.dim(3);
  if (bh % sd.dim(2) != 0 || bw % sd.dim(3) != 0)
    throw ShapeError("fuse_priors: sd prior " + shape_str(sd.shape()) +
                     " does not divide BEV dims " + shape_str(bev0.shape()));
  Grid4 sd_up = ops::upsample_nearest(sd, bh / sd.dim(2), tape);
  if (sd_up.dim(3) != bw)
    throw ShapeError("fuse_priors: sd prior aspect mismatch " + shape_str(sd.shape()));
  Grid4 f1 = conv_block(p, "sdfuse", ops::concat_channels(bev0, sd_up, tape), 1, 0, tape);
  if (hd.dim(2) % bh != 0)
    throw ShapeError("fuse_priors: hd prior " + shape_str(hd.shape()) +
                     " not a multiple of BEV dims");
  Grid4 hd_dn = ops::avg_pool2d(hd, hd.dim(2) / bh, tape);
  return conv_block(p, "hdfuse", ops::concat_channels(f1, hd_dn, tape), 1, 0, tape);
}

}  // namespace nets_detail

/// Camera-only student: 3-block encoder with one 2x downsample, learned BEV
/// reprojection, decoder. The distillation feature is the BEVProj output.
inline ForwardOut student_forward(const NetParams& p, Grid4 cam, Tape* tape = nullptr) {
  using namespace nets_detail;
  check_role(p, Role::Student, "student_forward");
  check_input(cam, kCamChannels, "cam_view");
  Grid4 x = conv_block(p, "enc1", cam, 2, 1, tape);
  x = conv_block(p, "enc2", x, 1, 1, tape);
  x = conv_block(p, "enc3", x, 1, 1, tape);
  ForwardOut out;
  out.bev = conv_block(p, "bevproj", x, 1, 1, tape);
  decode(p, out.bev, out, tape);
  return out;
}

/// Full-modality teacher: image + lidar encoders, BEV projection of the
/// concatenated features, SD/HD prior fusion in sequence, decoder. The
/// distillation feature is the post-HD-fusion BEV feature.
inline ForwardOut teacher_forward(const NetParams& p, Grid4 cam, Grid4 lidar, Grid4 sd, Grid4 hd,
                                  Tape* tape = nullptr) {
  using namespace nets_detail;
  check_role(p, Role::Teacher, "teacher_forward");
  check_input(cam, kCamChannels, "cam_view");
  check_input(lidar, kLidarChannels, "lidar_view");
  check_input(sd, 1, "sd_prior");
  check_input(hd, kNumClasses, "hd_prior");
  Grid4 fi = conv_block(p, "img2", conv_block(p, "img1", cam, 2, 1, tape), 1, 1, tape);
  ForwardOut out;
  out.lidar_feat = conv_block(p, "lid2", conv_block(p, "lid1", lidar, 2, 1, tape), 1, 1, tape);
  Grid4 bev0 = conv_block(p, "bevproj", ops::concat_channels(fi, out.lidar_feat, tape), 1, 1, tape);
  out.bev = fuse_priors(p, bev0, sd, hd, tape);
  decode(p, out.bev, out, tape);
  return out;
}

/// Camera-only coach: a 2D encoder plus a pseudo-lidar encoder whose output
/// matches the teacher's lidar feature shape, then the teacher's wiring.
inline ForwardOut coach_forward(const NetParams& p, Grid4 cam, Grid4 sd, Grid4 hd,
                                Tape* tape = nullptr) {
  using namespace nets_detail;
  check_role(p, Role::Coach, "coach_forward");
  check_input(cam, kCamChannels, "cam_view");
  check_input(sd, 1, "sd_prior");
  check_input(hd, kNumClasses, "hd_prior");
  Grid4 fi = conv_block(p, "enc2d2", conv_block(p, "enc2d1", cam, 2, 1, tape), 1, 1, tape);
  ForwardOut out;
  out.lidar_feat = conv_block(p, "enc3d2", conv_block(p, "enc3d1", cam, 2, 1, tape), 1, 1, tape);
  Grid4 bev0 = conv_block(p, "bevproj", ops::concat_channels(fi, out.lidar_feat, tape), 1, 1, tape);
  out.bev = fuse_priors(p, bev0, sd, hd, tape);
  decode(p, out.bev, out, tape);
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

inline constexpr char kParamsMagic[4] = {'M', 'K', 'P', 'T'};
inline constexpr std::uint32_t kParamsVersion = 1;

inline void save_params(const NetParams& p, const std::filesystem::path& path) {
  container::Writer w(kParamsMagic, kParamsVersion);
  w.str(role_name(p.role()));
  w.u8(p.frozen() ? 1 : 0);
  w.u64(p.items().size());
  for (const auto& [name, g] : p.items()) {
    w.str(name);
    w.grid(g);
  }
  w.finish(path);
}

inline NetParams load_params(const std::filesystem::path& path) {
  container::Reader r(path, kParamsMagic, kParamsVersion);
  NetParams p(role_from_name(r.str()));
  const bool frozen = r.u8() != 0;
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    p.add(name, r.grid());
  }
  if (frozen) p.freeze();
  return p;
}

inline bool params_bit_equal(const NetParams& a, const NetParams& b) {
  if (a.role() != b.role() || a.items().size() != b.items().size()) return false;
  for (std::size_t i = 0; i < a.items().size(); ++i) {
    if (a.items()[i].first != b.items()[i].first) return false;
    const Grid4 &x = a.items()[i].second, &y = b.items()[i].second;
    if (x.shape() != y.shape() || x.values() != y.values()) return false;
  }
  return true;
}

}  // namespace mapkd
