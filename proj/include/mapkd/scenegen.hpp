// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mapkd/container.hpp"
#include "mapkd/domain.hpp"
#include "mapkd/grid4.hpp"
#include "mapkd/raster.hpp"
#include "mapkd/rng.hpp"

// Procedural BEV scene generation. Ground truth is a 3-class binary raster
// (pedestrian crossing, lane divider, road boundary); the four modality
// views are derived degradations of it, all in the BEV frame. Every view
// pulls randomness from its own derived stream so that e.g. camera
// occlusion settings can never perturb the lidar view.

namespace mapkd {

struct GenConfig {
  std::int64_t height = 64;
  std::int64_t width = 128;
  std::int64_t train_count = 512;
  std::int64_t val_count = 128;

  std::int64_t div_min = 3, div_max = 5;
  std::int64_t bnd_min = 1, bnd_max = 3;
  std::int64_t ped_min = 2, ped_max = 4;
  std::int64_t div_width_min = 2, div_width_max = 3;
  std::int64_t bnd_width_min = 2, bnd_width_max = 3;
  std::int64_t ped_width_min = 3, ped_width_max = 6;

  double cam_blur_sigma = 1.0;
  double cam_occlusion_rate = 0.25;
  double cam_noise_sigma = 0.02;
  double lidar_keep0 = 0.95;
  double lidar_range = 1.0;
  std::int64_t sd_factor = 8;
  double hd_dropout = 0.1;
  std::int64_t hd_jitter = 1;

  void validate() const {
    if (height < 16 || width < 16 || height % 8 != 0 || width % 8 != 0)
      throw ValueError("GenConfig: grid dims must be >=16 and divisible by 8");
    if (height % sd_factor != 0 || width % sd_factor != 0 || sd_factor < 1)
      throw ValueError("GenConfig: sd_factor must divide the grid dims");
    auto range_ok = [](std::int64_t lo, std::int64_t hi) { return lo >= 0 && lo <= hi; };
    if (!range_ok(div_min, div_max) || !range_ok(bnd_min, bnd_max) || !range_ok(ped_min, ped_max))
      throw ValueError("GenConfig: element count ranges must satisfy 0 <= min <= max");
    if (div_max + bnd_max + ped_max == 0)
      throw ValueError("GenConfig: degenerate config, no elements to draw");
    if (div_width_min < 1 || bnd_width_min < 1 || ped_width_min < 1 ||
        div_width_min > div_width_max || bnd_width_min > bnd_width_max ||
        ped_width_min > ped_width_max)
      throw ValueError("GenConfig: stroke width ranges must satisfy 1 <= min <= max");
    for (double r : {cam_occlusion_rate, lidar_keep0, hd_dropout})
      if (r < 0.0 || r > 1.0) throw ValueError("GenConfig: rates must lie in [0,1]");
    if (cam_blur_sigma < 0.0 || cam_noise_sigma < 0.0 || lidar_range <= 0.0 || hd_jitter < 0)
      throw ValueError("GenConfig: negative degradation parameter");
    if (train_count < 0 || val_count < 0) throw ValueError("GenConfig: negative dataset size");
  }
};

struct SceneSample {
  std::uint64_t seed = 0;
  Grid4 gt_sem;                       // (1,3,H,W), entries in {0,1}
  std::vector<std::int32_t> gt_inst;  // 3*H*W, per-class 4-connected instance ids, 0 = none
  Grid4 cam_view;                     // (1,3,H,W) dense
  Grid4 lidar_view;                   // (1,2,H,W) sparse: occupancy + height
  Grid4 sd_prior;                     // (1,1,H/f,W/f)
  Grid4 hd_noisy;                     // (1,3,H,W), entries in {0,1}
};

struct OcclusionRect {
  std::int64_t y0, x0, h, w;
};

namespace scenegen_detail {

inline void stamp(std::vector<double>& plane, std::int64_t H, std::int64_t W, double cy, double cx,
                  std::int64_t t) {
  const std::int64_t lo = (t - 1) / 2, hi = t / 2;
  const std::int64_t iy = static_cast<std::int64_t>(std::llround(cy));
  const std::int64_t ix = static_cast<std::int64_t>(std::llround(cx));
  for (std::int64_t dy = -lo; dy <= hi; ++dy)
    for (std::int64_t dx = -lo; dx <= hi; ++dx) {
      const std::int64_t y = iy + dy, x = ix + dx;
      if (y >= 0 && y < H && x >= 0 && x < W) plane[y * W + x] = 1.0;
    }
}

inline void draw_segment(std::vector<double>& plane, std::int64_t H, std::int64_t W, double x0,
                         double y0, double x1, double y1, std::int64_t t) {
  const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  const int steps = std::max(1, static_cast<int>(std::ceil(len * 2.0)));
  for (int i = 0; i <= steps; ++i) {
    const double a = static_cast<double>(i) / steps;
    stamp(plane, H, W, y0 + a * (y1 - y0), x0 + a * (x1 - x0), t);
  }
}

inline double ego_dist(std::int64_t y, std::int64_t x, std::int64_t H, std::int64_t W) {
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  return std::hypot(y - cy, x - cx);
}

inline double ego_dist_max(std::int64_t H, std::int64_t W) {
  return std::hypot((H - 1) / 2.0, (W - 1) / 2.0);
}

}  // namespace scenegen_detail

struct SceneGeometry {
  Grid4 gt_sem;
  std::vector<std::vector<std::pair<double, double>>> divider_polylines;  // (x,y) points
};

inline SceneGeometry build_geometry(const GenConfig& cfg, Rng& rng) {
  using namespace scenegen_detail;
  const std::int64_t H = cfg.height, W = cfg.width;
  Grid4 gt(1, kNumClasses, H, W);
  std::vector<double> ped(static_cast<std::size_t>(H * W), 0.0);
  std::vector<double> div(static_cast<std::size_t>(H * W), 0.0);
  std::vector<double> bnd(static_cast<std::size_t>(H * W), 0.0);

  SceneGeometry geo;

  // Geometry ranges are fractions of the grid so any valid grid size works.
  const double fh = static_cast<double>(H), fw = static_cast<double>(W);

  // Dividers: jittered left-to-right polylines.
  const std::int64_t ndiv = rng.uniform_int(cfg.div_min, cfg.div_max);
  for (std::int64_t d = 0; d < ndiv; ++d) {
    const std::int64_t t = rng.uniform_int(cfg.div_width_min, cfg.div_width_max);
    double y = rng.uniform(0.09 * fh, 0.91 * fh);
    double x = 0.0;
    std::vector<std::pair<double, double>> pts{{x, y}};
    while (x < W - 1) {
      x = std::min(fw - 1.0, x + rng.uniform(0.08 * fw, 0.14 * fw));
      y = std::clamp(y + rng.uniform(-0.08 * fh, 0.08 * fh), 0.03 * fh, 0.96 * fh);
      pts.emplace_back(x, y);
    }
    for (std::size_t i = 1; i < pts.size(); ++i)
      draw_segment(div, H, W, pts[i - 1].first, pts[i - 1].second, pts[i].first, pts[i].second, t);
    geo.divider_polylines.push_back(std::move(pts));
  }

  // Boundaries: closed wobbly ellipse outlines.
  const std::int64_t nbnd = rng.uniform_int(cfg.bnd_min, cfg.bnd_max);
  for (std::int64_t b = 0; b < nbnd; ++b) {
    const std::int64_t t = rng.uniform_int(cfg.bnd_width_min, cfg.bnd_width_max);
    const double cx = rng.uniform(0.16 * fw, 0.84 * fw);
    const double cy = rng.uniform(0.19 * fh, 0.81 * fh);
    const double rx = rng.uniform(0.11 * fw, 0.30 * fw);
    const double ry = rng.uniform(0.12 * fh, 0.31 * fh);
    const double a1 = rng.uniform(0.0, 0.15), p1 = rng.uniform(0.0, 6.28318);
    const double a2 = rng.uniform(0.0, 0.10), p2 = rng.uniform(0.0, 6.28318);
    const int segs = 140;
    double px = 0, py = 0;
    for (int i = 0; i <= segs; ++i) {
      const double th = 2.0 * 3.14159265358979323846 * i / segs;
      const double s = 1.0 + a1 * std::sin(2.0 * th + p1) + a2 * std::sin(3.0 * th + p2);
      const double x = cx + rx * s * std::cos(th);
      const double y = cy + ry * s * std::sin(th);
      if (i > 0) draw_segment(bnd, H, W, px, py, x, y, t);
      px = x;
      py = y;
    }
  }

  // Pedestrian crossings: short thick strips perpendicular to a divider.
  const std::int64_t nped = rng.uniform_int(cfg.ped_min, cfg.ped_max);
  for (std::int64_t p = 0; p < nped; ++p) {
    const std::int64_t wid = rng.uniform_int(cfg.ped_width_min, cfg.ped_width_max);
    const double len = rng.uniform(0.125 * fh, 0.22 * fh);
    double cx, cy, dx, dy;
    if (!geo.divider_polylines.empty()) {
      const auto& pl = geo.divider_polylines[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(geo.divider_polylines.size()) - 1))];
      const auto si = static_cast<std::size_t>(
          rng.uniform_int(1, static_cast<std::int64_t>(pl.size()) - 1));
      const double a = rng.uniform(0.2, 0.8);
      cx = pl[si - 1].first + a * (pl[si].first - pl[si - 1].first);
      cy = pl[si - 1].second + a * (pl[si].second - pl[si - 1].second);
      dx = pl[si].first - pl[si - 1].first;
      dy = pl[si].second - pl[si - 1].second;
    } else {
      cx = rng.uniform(0.1 * fw, 0.9 * fw);
      cy = rng.uniform(0.1 * fh, 0.9 * fh);
      dx = rng.uniform(-1.0, 1.0);
      dy = rng.uniform(-1.0, 1.0);
    }
    const double n = std::max(1e-9, std::hypot(dx, dy));
    const double ux = -dy / n, uy = dx / n;  // perpendicular to the divider
    draw_segment(ped, H, W, cx - ux * len / 2, cy - uy * len / 2, cx + ux * len / 2,
                 cy + uy * len / 2, wid);
  }

  for (std::int64_t i = 0; i < H * W; ++i) {
    gt.data()[0 * H * W + i] = ped[static_cast<std::size_t>(i)];
    gt.data()[1 * H * W + i] = div[static_cast<std::size_t>(i)];
    gt.data()[2 * H * W + i] = bnd[static_cast<std::size_t>(i)];
  }
  geo.gt_sem = gt;
  return geo;
}

/// Instance ids are the 4-connected components of each class plane.
inline std::vector<std::int32_t> derive_instances(const Grid4& gt_sem) {
  const std::int64_t H = gt_sem.dim(2), W = gt_sem.dim(3);
  std::vector<std::int32_t> inst(static_cast<std::size_t>(kNumClasses * H * W), 0);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(H * W));
  for (int c = 0; c < kNumClasses; ++c) {
    for (std::int64_t i = 0; i < H * W; ++i)
      mask[static_cast<std::size_t>(i)] = gt_sem.data()[c * H * W + i] != 0.0 ? 1 : 0;
    raster::label_components(mask.data(), H, W, inst.data() + c * H * W);
  }
  return inst;
}

/// Camera-like view: class intensities blended onto 3 channels over a flat
/// road base, blurred more with distance from ego, Gaussian pixel noise,
/// then constant-value occlusion rectangles (applied last so occluded cells
/// carry no information at all).
inline Grid4 derive_cam_view(const Grid4& gt_sem, const GenConfig& cfg, Rng& rng,
                             std::vector<OcclusionRect>* rects_out = nullptr) {
  using namespace scenegen_detail;
  const std::int64_t H = gt_sem.dim(2), W = gt_sem.dim(3);
  static constexpr double kBlend[kCamChannels][kNumClasses] = {
      {0.90, 0.25, 0.15}, {0.20, 0.90, 0.20}, {0.15, 0.30, 0.85}};
  static constexpr double kBase = 0.1;
  Grid4 cam(1, kCamChannels, H, W);
  for (int ch = 0; ch < kCamChannels; ++ch)
    for (std::int64_t i = 0; i < H * W; ++i) {
      double v = kBase;
      for (int cls = 0; cls < kNumClasses; ++cls) v += kBlend[ch][cls] * gt_sem.data()[cls * H * W + i];
      cam.data()[ch * H * W + i] = v;
    }

  if (cfg.cam_blur_sigma > 0.0) {
    const double dmax = ego_dist_max(H, W);
    for (int ch = 0; ch < kCamChannels; ++ch) {
      std::vector<double> lv0(cam.data() + ch * H * W, cam.data() + (ch + 1) * H * W);
      std::vector<double> lv1 = raster::box_blur3(lv0, H, W);
      std::vector<double> lv2 = raster::box_blur3(lv1, H, W);
      std::vector<double> lv3 = raster::box_blur3(lv2, H, W);
      const std::vector<double>* levels[4] = {&lv0, &lv1, &lv2, &lv3};
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
          const int lvl = std::min(
              3, static_cast<int>(std::floor(cfg.cam_blur_sigma * 4.0 * ego_dist(y, x, H, W) / dmax)));
          cam.data()[ch * H * W + y * W + x] = (*levels[lvl])[static_cast<std::size_t>(y * W + x)];
        }
    }
  }

  if (cfg.cam_noise_sigma > 0.0)
    for (std::int64_t i = 0; i < kCamChannels * H * W; ++i)
      cam.data()[i] += rng.normal(0.0, cfg.cam_noise_sigma);

  constexpr int kOcclusionSlots = 8;
  constexpr double kOcclusionFill = 0.5;
  for (int s = 0; s < kOcclusionSlots; ++s) {
    const bool place = rng.bernoulli(cfg.cam_occlusion_rate);
    const std::int64_t rh = rng.uniform_int(6, 14), rw = rng.uniform_int(8, 20);
    const std::int64_t y0 = rng.uniform_int(0, H - rh), x0 = rng.uniform_int(0, W - rw);
    if (!place) continue;
    for (int ch = 0; ch < kCamChannels; ++ch)
      for (std::int64_t y = y0; y < y0 + rh; ++y)
        for (std::int64_t x = x0; x < x0 + rw; ++x)
          cam.data()[ch * H * W + y * W + x] = kOcclusionFill;
    if (rects_out) rects_out->push_back({y0, x0, rh, rw});
  }
  return cam;
}

/// Lidar-like view: foreground edge cells survive with a distance-decaying
/// probability; channel 1 carries a per-class pseudo-height. No occlusions.
inline Grid4 derive_lidar_view(const Grid4& gt_sem, const GenConfig& cfg, Rng& rng) {
  using namespace scenegen_detail;
  const std::int64_t H = gt_sem.dim(2), W = gt_sem.dim(3);
  static constexpr double kHeight[kNumClasses] = {0.25, 0.45, 0.65};
  Grid4 lid(1, kLidarChannels, H, W);
  const double dmax = ego_dist_max(H, W);
  auto fg = [&](std::int64_t y, std::int64_t x) {
    for (int c = 0; c < kNumClasses; ++c)
      if (gt_sem.data()[c * H * W + y * W + x] != 0.0) return true;
    return false;
  };
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      if (!fg(y, x)) continue;
      const bool edge = y == 0 || y == H - 1 || x == 0 || x == W - 1 || !fg(y - 1, x) ||
                        !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1);
      if (!edge) continue;
      const double p = cfg.lidar_keep0 * std::exp(-ego_dist(y, x, H, W) / (cfg.lidar_range * dmax));
      if (!rng.bernoulli(p)) continue;
      int top = 0;
      for (int c = kNumClasses - 1; c >= 0; --c)
        if (gt_sem.data()[c * H * W + y * W + x] != 0.0) {
          top = c;
          break;
        }
      lid.data()[0 * H * W + y * W + x] = 1.0;
      lid.data()[1 * H * W + y * W + x] = kHeight[top];
    }
  return lid;
}

/// SD prior: thinned skeleton of the boundary class, block-max downsampled.
/// A pure function of the ground truth.
inline Grid4 derive_sd_prior(const Grid4& gt_sem, const GenConfig& cfg) {
  const std::int64_t H = gt_sem.dim(2), W = gt_sem.dim(3), f = cfg.sd_factor;
  std::vector<std::uint8_t> bnd(static_cast<std::size_t>(H * W));
  for (std::int64_t i = 0; i < H * W; ++i)
    bnd[static_cast<std::size_t>(i)] = gt_sem.data()[kClassBnd * H * W + i] != 0.0 ? 1 : 0;
  raster::thin(bnd, H, W);
  Grid4 sd(1, 1, H / f, W / f);
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x)
      if (bnd[static_cast<std::size_t>(y * W + x)]) sd.data()[(y / f) * (W / f) + x / f] = 1.0;
  return sd;
}

/// Offline-HD-map stand-in: ground truth with each instance translated by a
/// random jitter offset and cells dropped out at the configured rate.
inline Grid4 derive_hd_noisy(const Grid4& gt_sem, const std::vector<std::int32_t>& gt_inst,
                             const GenConfig& cfg, Rng& rng) {
  const std::int64_t H = gt_sem.dim(2), W = gt_sem.dim(3);
  Grid4 hd(1, kNumClasses, H, W);
  for (int c = 0; c < kNumClasses; ++c) {
    const std::int32_t* inst = gt_inst.data() + c * H * W;
    std::int32_t nk = 0;
    for (std::int64_t i = 0; i < H * W; ++i) nk = std::max(nk, inst[i]);
    for (std::int32_t k = 1; k <= nk; ++k) {
      const std::int64_t dx = rng.uniform_int(-cfg.hd_jitter, cfg.hd_jitter);
      const std::int64_t dy = rng.uniform_int(-cfg.hd_jitter, cfg.hd_jitter);
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
          if (inst[y * W + x] != k) continue;
          const std::int64_t ny = y + dy, nx = x + dx;
          if (ny >= 0 && ny < H && nx >= 0 && nx < W) hd.data()[c * H * W + ny * W + nx] = 1.0;
        }
    }
  }
  if (cfg.hd_dropout > 0.0)
    for (std::int64_t i = 0; i < kNumClasses * H * W; ++i)
      if (hd.data()[i] == 1.0 && rng.bernoulli(cfg.hd_dropout)) hd.data()[i] = 0.0;
  return hd;
}

inline SceneSample generate_scene(const GenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SceneSample s;
  s.seed = seed;
  Rng geom(derive_seed(seed, "scene-geom"));
  SceneGeometry geo = build_geometry(cfg, geom);
  s.gt_sem = geo.gt_sem;
  s.gt_inst = derive_instances(s.gt_sem);
  Rng rc(derive_seed(seed, "cam-view"));
  s.cam_view = derive_cam_view(s.gt_sem, cfg, rc);
  Rng rl(derive_seed(seed, "lidar-view"));
  s.lidar_view = derive_lidar_view(s.gt_sem, cfg, rl);
  s.sd_prior = derive_sd_prior(s.gt_sem, cfg);
  Rng rh(derive_seed(seed, "hd-noisy"));
  s.hd_noisy = derive_hd_noisy(s.gt_sem, s.gt_inst, cfg, rh);
  return s;
}

// ---------------------------------------------------------------------------
// dataset container
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[4] = {'M', 'K', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const std::vector<SceneSample>& samples, const std::string& config_echo,
                         const std::filesystem::path& path) {
  container::Writer w(kDatasetMagic, kDatasetVersion);
  w.str(config_echo);
  w.u64(samples.size());
  for (const auto& s : samples) {
    container::Writer rec;
    rec.u64(s.seed);
    rec.grid(s.gt_sem);
    rec.i32_array(s.gt_inst);
    rec.grid(s.cam_view);
    rec.grid(s.lidar_view);
    rec.grid(s.sd_prior);
    rec.grid(s.hd_noisy);
    w.block(rec);
  }
  w.finish(path);
}

struct LoadedDataset {
  std::string config_echo;
  std::vector<SceneSample> samples;
};

inline LoadedDataset load_dataset(const std::filesystem::path& path) {
  container::Reader r(path, kDatasetMagic, kDatasetVersion);
  LoadedDataset d;
  d.config_echo = r.str();
  const std::uint64_t n = r.u64();
  d.samples.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    r.block_len();
    SceneSample s;
    s.seed = r.u64();
    s.gt_sem = r.grid();
    s.gt_inst = r.i32_array();
    s.cam_view = r.grid();
    s.lidar_view = r.grid();
    s.sd_prior = r.grid();
    s.hd_noisy = r.grid();
    d.samples.push_back(std::move(s));
  }
  return d;
}

inline bool samples_bit_equal(const SceneSample& a, const SceneSample& b) {
  auto geq = [](const Grid4& x, const Grid4& y) {
    return x.shape() == y.shape() && x.values() == y.values();
  };
  return a.seed == b.seed && geq(a.gt_sem, b.gt_sem) && a.gt_inst == b.gt_inst &&
         geq(a.cam_view, b.cam_view) && geq(a.lidar_view, b.lidar_view) &&
         geq(a.sd_prior, b.sd_prior) && geq(a.hd_noisy, b.hd_noisy);
}

}  // namespace mapkd
