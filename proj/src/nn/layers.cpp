#include "sona/nn/layers.hpp"

#include <cmath>

#include "sona/core/error.hpp"

namespace sona::nn {

namespace {
Tensor uniform_init(Rng& rng, const Shape& shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_tensor(shape, -bound, bound);
}
}  // namespace

Dense::Dense(ParamBlock& block, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  weight = block.add(prefix + ".weight", uniform_init(rng, {out, in}, in));
  bias = block.add(prefix + ".bias", uniform_init(rng, {out}, in));
}

Conv2d::Conv2d(ParamBlock& block, const std::string& prefix, std::size_t in, std::size_t out, std::size_t kernel,
               std::size_t stride_, std::size_t padding_, Rng& rng)
    : stride(stride_), padding(padding_) {
  const std::size_t fan_in = in * kernel * kernel;
  weight = block.add(prefix + ".weight", uniform_init(rng, {out, in, kernel, kernel}, fan_in));
  bias = block.add(prefix + ".bias", uniform_init(rng, {out}, fan_in));
}

GroupNorm::GroupNorm(ParamBlock& block, const std::string& prefix, std::size_t channels, std::size_t groups_)
    : groups(groups_) {
  gamma = block.add(prefix + ".gamma", Tensor({channels}, real(1)));
  beta = block.add(prefix + ".beta", Tensor({channels}, real(0)));
}

Embedding::Embedding(ParamBlock& block, const std::string& prefix, std::size_t vocab, std::size_t width, Rng& rng) {
  table = block.add(prefix + ".table", rng.normal_tensor({vocab, width}, 1.0));
}

Tensor sinusoidal_embedding(std::span<const std::int32_t> steps, std::size_t width) {
  if (width == 0 || width % 2 != 0) throw ArgumentError("sinusoidal width must be even and positive");
  const std::size_t half = width / 2;
  Tensor out(Shape{steps.size(), width});
  for (std::size_t b = 0; b < steps.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double a = steps[b] * freq;
      out[b * width + i] = static_cast<real>(std::sin(a));
      out[b * width + half + i] = static_cast<real>(std::cos(a));
    }
  }
  return out;
}

}  // namespace sona::nn
