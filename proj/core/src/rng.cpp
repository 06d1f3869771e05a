#include "lrgan/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "lrgan/errors.hpp"

namespace lrgan {

double Rng::normal() {
  // u1 in (0, 1] so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::randint(std::uint64_t n) {
  if (n == 0) throw ValidationError("Rng::randint: n must be positive");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return v % n;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  if (is.fail()) throw ValidationError("Rng::set_state: malformed state string");
}

}  // namespace lrgan
