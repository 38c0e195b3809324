// SPDX-License-Identifier: Apache-2.0
#pragma once

// Map-element classes and modality channel counts shared across the
// generator, the networks, and the metrics.

namespace mapkd {

inline constexpr int kClassPed = 0;
inline constexpr int kClassDiv = 1;
inline constexpr int kClassBnd = 2;
inline constexpr int kNumClasses = 3;
inline constexpr int kCamChannels = 3;
inline constexpr int kLidarChannels = 2;

inline constexpr const char* kClassNames[kNumClasses] = {"ped", "div", "bnd"};

}  // namespace mapkd
