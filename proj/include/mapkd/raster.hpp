// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

namespace mapkd::raster {

/// 4-connected component labeling over a binary mask, labels 1..K assigned
/// in raster scan order of each component's first pixel. Returns K.
inline std::int32_t label_components(const std::uint8_t* mask, std::int64_t h, std::int64_t w,
                                     std::int32_t* labels) {
  const std::int64_t n = h * w;
  for (std::int64_t i = 0; i < n; ++i) labels[i] = 0;
  std::int32_t next = 0;
  std::vector<std::int64_t> stack;
  for (std::int64_t start = 0; start < n; ++start) {
    if (!mask[start] || labels[start] != 0) continue;
    ++next;
    stack.clear();
    stack.push_back(start);
    labels[start] = next;
    while (!stack.empty()) {
      const std::int64_t i = stack.back();
      stack.pop_back();
      const std::int64_t y = i / w, x = i % w;
      const std::int64_t nb[4] = {y > 0 ? i - w : -1, y < h - 1 ? i + w : -1,
                                  x > 0 ? i - 1 : -1, x < w - 1 ? i + 1 : -1};
      for (std::int64_t j : nb)
        if (j >= 0 && mask[j] && labels[j] == 0) {
          labels[j] = next;
          stack.push_back(j);
        }
    }
  }
  return next;
}

/// Zhang-Suen thinning to a 1-px skeleton; iterates until stable.
inline void thin(std::vector<std::uint8_t>& img, std::int64_t h, std::int64_t w) {
  auto at = [&](std::int64_t y, std::int64_t x) -> std::uint8_t {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0;
    return img[y * w + x];
  };
  std::vector<std::int64_t> kill;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      kill.clear();
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          if (!at(y, x)) continue;
          // neighbors p2..p9 clockwise from north
          const std::uint8_t p[8] = {at(y - 1, x),     at(y - 1, x + 1), at(y, x + 1),
                                     at(y + 1, x + 1), at(y + 1, x),     at(y + 1, x - 1),
                                     at(y, x - 1),     at(y - 1, x - 1)};
          int b = 0;
          for (std::uint8_t v : p) b += v;
          if (b < 2 || b > 6) continue;
          int a = 0;
          for (int k = 0; k < 8; ++k)
            if (!p[k] && p[(k + 1) % 8]) ++a;
          if (a != 1) continue;
          if (pass == 0) {
            if (p[0] * p[2] * p[4] != 0) continue;
            if (p[2] * p[4] * p[6] != 0) continue;
          } else {
            if (p[0] * p[2] * p[6] != 0) continue;
            if (p[0] * p[4] * p[6] != 0) continue;
          }
          kill.push_back(y * w + x);
        }
      if (!kill.empty()) changed = true;
      for (std::int64_t i : kill) img[i] = 0;
    }
  }
}

/// 3x3 box blur with edge clamping (divides by the in-bounds count).
inline std::vector<double> box_blur3(const std::vector<double>& src, std::int64_t h,
                                     std::int64_t w) {
  std::vector<double> out(src.size());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      int cnt = 0;
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const std::int64_t yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          acc += src[yy * w + xx];
          ++cnt;
        }
      out[y * w + x] = acc / cnt;
    }
  return out;
}

}  // namespace mapkd::raster
