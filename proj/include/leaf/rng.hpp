#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace leaf {

// Seeded generator with platform-independent derived draws. The standard
// distributions are implementation-defined, so only the raw engine output is
// used and mapped here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    const unsigned __int128 product = static_cast<unsigned __int128>(engine_()) * n;
    return static_cast<std::uint64_t>(product >> 64);
  }

  template <typename Container>
  void shuffle(Container& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  std::string state() const {
    std::ostringstream out;
    out << engine_;
    return out.str();
  }

  void restore(const std::string& state) {
    std::istringstream in(state);
    in >> engine_;
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace leaf
