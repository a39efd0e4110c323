#include "mdasr/common.hpp"
#include "mdasr/random.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace mdasr {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::configuration: return "configuration";
        case ErrorKind::length: return "length";
        case ErrorKind::contract: return "contract";
        case ErrorKind::training: return "training";
        case ErrorKind::format: return "format";
        case ErrorKind::corruption: return "corruption";
        case ErrorKind::config_mismatch: return "config-mismatch";
        case ErrorKind::io: return "io";
        case ErrorKind::missing_input: return "missing-input";
    }
    return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

std::string join_tokens(const TokenSeq& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(tokens[i]);
    }
    return out;
}

TokenSeq parse_tokens(std::string_view text) {
    TokenSeq out;
    std::istringstream in{std::string(text)};
    long long value = 0;
    while (in >> value) out.push_back(static_cast<Token>(value));
    if (!in.eof()) fail(ErrorKind::format, "malformed token list: '" + std::string(text) + "'");
    return out;
}

double Rng::normal() {
    // Box-Muller, one value per call.
    const double u1 = uniform_open_closed();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t b = bound;
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % b);
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return static_cast<std::size_t>(x % b);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace mdasr
