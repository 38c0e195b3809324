// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "mapkd/grid4.hpp"

namespace mapkd {

/// Reverse-mode tape. Forward ops that receive a non-null Tape* push one
/// backward closure each; backward() replays them in exact reverse
/// execution order. A tape can be consumed once per set of recorded ops;
/// reset() clears it for the next forward.
class Tape {
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;

public:
  void record(std::function<void()> fn) {
    if (consumed_)
      throw std::logic_error("Tape: recording onto a consumed tape; call reset() first");
    entries_.push_back(std::move(fn));
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward closure in
  /// reverse order, accumulating into the grad buffers of all tensors that
  /// participated in the forward.
  void backward(Grid4 loss) {
    if (consumed_) throw std::logic_error("Tape: backward called twice without a new forward");
    if (!loss.valid() || loss.numel() != 1)
      throw ShapeError("Tape::backward: loss must be scalar, got " +
                       (loss.valid() ? shape_str(loss.shape()) : std::string("null")));
    loss.grad()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    consumed_ = true;
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }
};

}  // namespace mapkd
