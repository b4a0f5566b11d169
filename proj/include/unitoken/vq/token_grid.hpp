#pragma once

#include <vector>

#include "unitoken/autodiff/tensor.hpp"

namespace unitoken {

/// h×w grid of codebook ids in row-major order.
struct TokenGrid {
  Index height = 0;
  Index width = 0;
  std::vector<int> ids;

  Index size() const { return height * width; }
  int at(Index y, Index x) const { return ids[static_cast<std::size_t>(y * width + x)]; }
  bool operator==(const TokenGrid&) const = default;
};

}  // namespace unitoken
