#pragma once

#include "vox/prec.h"

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

VOX_BEGIN

// Seeded generator whose children are derived by name, so adding a consumer
// in one module never shifts the stream seen by another.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    uint64_t seed() const { return seed_; }
    Rng split(std::string_view name) const;
    Rng split(uint64_t index) const;

    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);   // [lo, hi)
    double normal();
    size_t uniform_int(size_t n);           // [0, n)
    bool bernoulli(double p) { return uniform() < p; }

    std::vector<real> normal_vec(size_t n, double stddev = 1.0);
    std::vector<real> uniform_vec(size_t n, double lo, double hi);

    std::mt19937_64 & engine() { return engine_; }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

uint64_t mix64(uint64_t x);

VOX_END
