#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mdasr {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// Reserved ids occupy the bottom of every vocabulary; content tokens follow.
namespace vocab {
inline constexpr Token pad = 0;
inline constexpr Token bos = 1;
inline constexpr Token eos = 2;
inline constexpr Token mask = 3;
inline constexpr int num_reserved = 4;

inline constexpr bool is_content(Token t) noexcept { return t >= num_reserved; }
}  // namespace vocab

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using LogitMatrix = Matrix<float>;
using FeatureMatrix = Matrix<float>;

enum class ErrorKind {
    configuration,
    length,
    contract,
    training,
    format,
    corruption,
    config_mismatch,
    io,
    missing_input,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Single exception type; `kind()` is what the CLI reports in its
// machine-parsable error line.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message);

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

std::string join_tokens(const TokenSeq& tokens);
TokenSeq parse_tokens(std::string_view text);

}  // namespace mdasr
