#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace s3pet {

// Seeded random stream. Streams are derived from (seed, name) so that adding a
// consumer to one stream never shifts the draws of another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::string_view stream) : engine_(derive(seed, stream)) {}

  static std::uint64_t derive(std::uint64_t seed, std::string_view stream) {
    // FNV-1a over the stream name, mixed with the seed through splitmix64.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : stream) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL + h;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  double gaussian(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  // Uniform on the open interval (0, 1).
  double uniform_open() {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    double u = dist(engine_);
    while (u <= 0.0 || u >= 1.0) u = dist(engine_);
    return u;
  }

  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace s3pet
