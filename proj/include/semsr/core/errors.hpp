#pragma once

#include <stdexcept>
#include <string>

namespace semsr {

// Error taxonomy shared by every module. The CLI maps UsageError/ConfigError
// to exit code 1 and everything else to exit code 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ArgumentError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct StateError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct VocabularyError : Error {
    using Error::Error;
};

struct DegradationError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ArgumentError(msg);
}

}  // namespace semsr
