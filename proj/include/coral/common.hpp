// common.hpp
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace coral {

using TokenId = std::uint32_t;
using TokenIds = std::vector<TokenId>;

// Base of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class RankError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class VocabularyError : public Error {
public:
    using Error::Error;
};

class LengthError : public Error {
public:
    using Error::Error;
};

class DegenerateMaskError : public Error {
public:
    using Error::Error;
};

// Malformed input files (CSV, JSON, checkpoints).
class FormatError : public Error {
public:
    using Error::Error;
};

// A file the caller named does not exist or cannot be opened.
class FileError : public Error {
public:
    FileError(const std::string& what, std::string path) : Error(what + ": " + path), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

class UnsupportedVersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class ContextOverflowError : public LengthError {
public:
    using LengthError::LengthError;
};

class DiscardedExampleError : public Error {
public:
    using Error::Error;
};

// 64-bit FNV-1a. Stable across platforms, used for vocabulary hashes and splits.
inline std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace coral
