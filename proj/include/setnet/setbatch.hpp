#pragma once

#include <optional>
#include <utility>

#include "setnet/tensor.hpp"

namespace setnet {

// A batch of zero-padded sets: activations [n, m, d] plus an optional
// validity mask. Padded positions hold exactly 0.
struct SetBatch {
  Tensor tensor;
  std::optional<Mask> mask;

  SetBatch() = default;
  SetBatch(Tensor t, std::optional<Mask> m = std::nullopt)
      : tensor(std::move(t)), mask(std::move(m)) {
    validate();
  }

  int64_t sets() const { return tensor.dim(0); }
  int64_t elems() const { return tensor.dim(1); }
  int64_t features() const { return tensor.dim(2); }
  const Mask* mask_ptr() const { return mask ? &*mask : nullptr; }
  bool valid(int64_t n, int64_t i) const {
    return !mask || mask->valid(n, i);
  }

  void validate() const {
    if (tensor.rank() != 3)
      throw dim_error("set batch must be rank 3, got " + tensor.shape_str());
    if (mask) {
      if (mask->sets() != sets() || mask->elems() != elems())
        throw dim_error("mask shape does not match batch");
      for (int64_t n = 0; n < sets(); ++n)
        for (int64_t i = 0; i < elems(); ++i) {
          if (mask->valid(n, i)) continue;
          for (int64_t j = 0; j < features(); ++j)
            if (tensor.at(n, i, j) != 0.0)
              throw numeric_error("padded position is not zero");
        }
    }
  }
};

}  // namespace setnet
