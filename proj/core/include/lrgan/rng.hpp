#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace lrgan {

// Deterministic random source. All sampling goes through hand-rolled
// transforms of the raw mt19937_64 stream, so sequences are identical across
// standard libraries and round-trip exactly through state()/set_state().
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the second value of each pair is
  // discarded so the generator stays stateless beyond the engine.
  double normal();

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t randint(std::uint64_t n);

  std::uint64_t raw() { return engine_(); }

  // Engine state serialized as text.
  std::string state() const;
  void set_state(const std::string& s);

  // Derive an independent generator (e.g. for data prefetch).
  Rng fork() { return Rng(engine_()); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lrgan
