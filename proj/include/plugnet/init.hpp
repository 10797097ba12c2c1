#pragma once

#include <cstddef>

#include "plugnet/rng.hpp"
#include "plugnet/tensor.hpp"

namespace plugnet {

// Glorot/Xavier uniform bound sqrt(6 / (fan_in + fan_out)).
double xavier_bound(std::size_t fan_in, std::size_t fan_out);

// Uniform samples in [-a, a] for a dense weight of shape [fan_out, fan_in].
Tensor xavier_init(std::size_t fan_out, std::size_t fan_in, Rng& rng);

// Same distribution for an arbitrary shape with explicit fans (conv kernels).
Tensor xavier_init(Shape shape, std::size_t fan_in, std::size_t fan_out,
                   Rng& rng);

}  // namespace plugnet
