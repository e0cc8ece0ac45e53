#include "vox/rng.h"

VOX_BEGIN

uint64_t mix64(uint64_t x) {
    // splitmix64 finaliser
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng Rng::split(std::string_view name) const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return Rng(mix64(seed_ ^ mix64(h)));
}

Rng Rng::split(uint64_t index) const { return Rng(mix64(seed_ + mix64(index + 1))); }

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() { return normal_(engine_); }

size_t Rng::uniform_int(size_t n) { return std::uniform_int_distribution<size_t>(0, n - 1)(engine_); }

std::vector<real> Rng::normal_vec(size_t n, double stddev) {
    std::vector<real> v(n);
    for (auto & x : v) x = real(normal() * stddev);
    return v;
}

std::vector<real> Rng::uniform_vec(size_t n, double lo, double hi) {
    std::vector<real> v(n);
    for (auto & x : v) x = real(uniform(lo, hi));
    return v;
}

VOX_END
