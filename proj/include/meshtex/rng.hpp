#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace meshtex {

// Seeded generator with named forking so independent consumers of one master
// seed stay decoupled from each other's draw counts.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed ^ 0x9e3779b97f4a7c15ull) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(gen_);
    }
    double uniform(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(gen_);
    }
    std::int64_t randint(std::int64_t n) {  // [0, n)
        std::uniform_int_distribution<std::int64_t> d(0, n - 1);
        return d(gen_);
    }
    std::uint64_t bits() { return gen_(); }

    Rng fork(const std::string& tag) const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](std::uint64_t v) {
            h ^= v;
            h *= 1099511628211ull;
        };
        mix(seed_view_);
        for (char c : tag) mix(static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
        return Rng(h);
    }

    template <typename T>
    void fill_normal(std::span<T> out, double mean = 0.0, double stddev = 1.0) {
        for (auto& v : out) v = static_cast<T>(normal(mean, stddev));
    }
    template <typename T>
    void fill_uniform(std::span<T> out, double lo = 0.0, double hi = 1.0) {
        for (auto& v : out) v = static_cast<T>(uniform(lo, hi));
    }

  private:
    explicit Rng(std::mt19937_64 g) : gen_(g) {}
    std::mt19937_64 gen_;
    std::uint64_t seed_view_ = gen_();  // decorrelates forks of forks
};

}  // namespace meshtex
