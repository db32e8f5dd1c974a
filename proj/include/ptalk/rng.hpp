#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "ptalk/tensor.hpp"

namespace ptalk {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Named RNG substream. All randomness in a run flows from one master seed;
// each consumer derives its stream as SeedStream(master, "stage/purpose").
class SeedStream {
public:
    SeedStream(uint64_t master, std::string_view name)
        : gen_(splitmix64(master ^ fnv1a(name))) {}
    explicit SeedStream(uint64_t seed) : gen_(splitmix64(seed)) {}

    std::mt19937_64& gen() { return gen_; }

    Scalar normal(Scalar mean = 0.0, Scalar stddev = 1.0) {
        std::normal_distribution<Scalar> d(mean, stddev);
        return d(gen_);
    }
    Scalar uniform(Scalar lo = 0.0, Scalar hi = 1.0) {
        std::uniform_real_distribution<Scalar> d(lo, hi);
        return d(gen_);
    }
    int uniform_int(int lo, int hi) {  // inclusive bounds
        std::uniform_int_distribution<int> d(lo, hi);
        return d(gen_);
    }

    Tensor normal_tensor(std::vector<int> shape, Scalar stddev = 1.0) {
        Tensor t(std::move(shape));
        std::normal_distribution<Scalar> d(0.0, stddev);
        for (auto& v : t.data) v = d(gen_);
        return t;
    }
    Tensor uniform_tensor(std::vector<int> shape, Scalar lo, Scalar hi) {
        Tensor t(std::move(shape));
        std::uniform_real_distribution<Scalar> d(lo, hi);
        for (auto& v : t.data) v = d(gen_);
        return t;
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace ptalk
