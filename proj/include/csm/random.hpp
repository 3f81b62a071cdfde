#pragma once

#include <array>
#include <cstdint>
#include <limits>

namespace csm {

/**
 * Philox4x32-10 counter-based generator. A (seed, stream) pair selects an
 * independent substream; draws within a substream walk the counter. Output is
 * 64 bits per call, so the engine plugs into <random> distributions.
 */
class Philox {
public:
    using result_type = std::uint64_t;

    explicit Philox(std::uint64_t seed = 0, std::uint64_t stream = 0) noexcept
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          counter_{0, 0, static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)} {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        if (buffered_ == 0) {
            block_ = generate(counter_, key_);
            increment();
            buffered_ = 2;
        }
        --buffered_;
        const std::size_t i = buffered_ == 1 ? 0 : 2;
        return static_cast<std::uint64_t>(block_[i]) | (static_cast<std::uint64_t>(block_[i + 1]) << 32);
    }

    /// Ten-round bijection of one counter block under a key.
    static std::array<std::uint32_t, 4> generate(std::array<std::uint32_t, 4> ctr,
                                                 std::array<std::uint32_t, 2> key) noexcept {
        constexpr std::uint32_t kMul0 = 0xD2511F53u, kMul1 = 0xCD9E8D57u;
        constexpr std::uint32_t kWeyl0 = 0x9E3779B9u, kWeyl1 = 0xBB67AE85u;
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
            const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
            ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
                   static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
            key[0] += kWeyl0;
            key[1] += kWeyl1;
        }
        return ctr;
    }

private:
    void increment() noexcept {
        if (++counter_[0] == 0) ++counter_[1];
    }

    std::array<std::uint32_t, 2> key_;
    std::array<std::uint32_t, 4> counter_;
    std::array<std::uint32_t, 4> block_{};
    int buffered_ = 0;
};

/// Seed of the i-th derived task (restart, replicate, partition).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
    Philox g(seed, index ^ 0x5EEDull << 40);
    return g();
}

}  // namespace csm
