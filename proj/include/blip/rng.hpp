/**
 * Counter-based splittable random number streams.
 *
 * Every consumer of randomness (data generation, weight init, per-sample
 * weight noise, ...) owns an independent stream derived from a root seed by
 * name and index. Derivation depends only on the parent's key, never on how
 * many values the parent has produced, so records / MC samples can be
 * generated in any order (or in parallel) with identical results.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>

namespace blip {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace detail

/// One independent pseudo-random stream (SplitMix64 sequence under a derived key).
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : key_(detail::mix64(seed + detail::kGolden)), state_(key_) {}

    /// Child stream identified by a label, e.g. derive("init").
    [[nodiscard]] RngStream derive(std::string_view label) const {
        return RngStream(key_, detail::fnv1a(label));
    }

    /// Child stream identified by a label and an index, e.g. derive("mc-sample", s).
    [[nodiscard]] RngStream derive(std::string_view label, std::uint64_t index) const {
        return RngStream(key_, detail::mix64(detail::fnv1a(label) + detail::mix64(index + 1)));
    }

    std::uint64_t next_u64() {
        state_ += detail::kGolden;
        return detail::mix64(state_);
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller (second deviate cached).
    double next_gaussian() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        // u1 in (0, 1] so the log is finite
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        double u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 2.0 * std::numbers::pi * u2;
        cached_ = r * std::sin(t);
        has_cached_ = true;
        return r * std::cos(t);
    }

    void fill_gaussian(std::span<double> out) {
        for (double& v : out) v = next_gaussian();
    }

    /// Number of u64 draws consumed so far (stream position).
    std::uint64_t position() const { return (state_ - key_) / detail::kGolden; }

    std::uint64_t key() const { return key_; }

private:
    RngStream(std::uint64_t parent_key, std::uint64_t salt)
        : key_(detail::mix64(parent_key ^ (salt + detail::kGolden))), state_(key_) {}

    std::uint64_t key_;
    std::uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace blip
