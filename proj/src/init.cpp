#include "plugnet/init.hpp"

#include <cmath>

namespace plugnet {

double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Tensor xavier_init(std::size_t fan_out, std::size_t fan_in, Rng& rng) {
  return xavier_init(Shape{fan_out, fan_in}, fan_in, fan_out, rng);
}

Tensor xavier_init(Shape shape, std::size_t fan_in, std::size_t fan_out,
                   Rng& rng) {
  const double a = xavier_bound(fan_in, fan_out);
  std::vector<float> values(shape_numel(shape));
  for (float& v : values) v = static_cast<float>(rng.uniform(-a, a));
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace plugnet
