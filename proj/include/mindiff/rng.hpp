#ifndef MINDIFF_RNG_HPP
#define MINDIFF_RNG_HPP

#include <cstdint>
#include <random>

namespace mindiff {

// splitmix64 finalizer; used to derive independent per-sample streams from
// (master seed, stream id) so parallel and serial generation agree.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::mt19937_64 make_stream(uint64_t seed, uint64_t stream) {
    return std::mt19937_64(mix_seed(seed, stream));
}

}  // namespace mindiff

#endif
