#pragma once

#include <stdexcept>
#include <string>

namespace feathernet {

// Base for every user-facing failure (bad shapes, bad files, bad config).
// Anything else escaping the library is treated as an internal error.
class Error : public std::runtime_error {
public:
    Error(std::string origin, const std::string& message)
        : std::runtime_error(origin + ": " + message), origin_(std::move(origin)) {}

    const std::string& origin() const noexcept { return origin_; }

private:
    std::string origin_;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

enum class FormatErrorKind {
    BadMagic,
    VersionMismatch,
    Truncated,
    ShapeMismatch,
    UnsupportedFormat,
    BadValue,
    Io,
};

class FormatError : public Error {
public:
    FormatError(std::string origin, FormatErrorKind kind, const std::string& message)
        : Error(std::move(origin), message), kind_(kind) {}

    FormatErrorKind kind() const noexcept { return kind_; }

private:
    FormatErrorKind kind_;
};

}  // namespace feathernet
