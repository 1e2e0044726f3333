#include "prefrank/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace prefrank::nk {

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("rng: below(0)");
  // Lemire's nearly-divisionless rejection.
  const auto range = static_cast<std::uint64_t>(n);
  unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * range;
  auto low = static_cast<std::uint64_t>(m);
  if (low < range) {
    const std::uint64_t threshold = (0 - range) % range;
    while (low < threshold) {
      m = static_cast<unsigned __int128>(next_u64()) * range;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::size_t>(m >> 64);
}

double Rng::normal() {
  // Box-Muller; one draw per call keeps the stream position predictable.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace prefrank::nk
