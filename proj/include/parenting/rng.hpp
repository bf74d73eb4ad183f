#pragma once

#include <cstdint>
#include <random>

namespace parenting {

/// Independent generator for one named purpose under a run seed.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

/// Stream identifiers, kept in one place so no two purposes share a generator.
enum RngStream : std::uint64_t {
    kStreamFacts = 1,
    kStreamCorpus,
    kStreamSplit,
    kStreamAdherence,
    kStreamRobustness,
    kStreamExtraction,
    kStreamEval,
    kStreamRecognition,
    kStreamPretrain,
    kStreamProbeAdherence,
    kStreamProbeRobustness,
    kStreamTune,
    kStreamSweep,
};

}  // namespace parenting
