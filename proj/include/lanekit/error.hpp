#pragma once

#include <stdexcept>
#include <string>

namespace lanekit {

// Base error for everything raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Bad run configuration (unknown key, value out of range).
struct ConfigError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// File system / serialization failures. Message carries the path.
struct IoError : Error {
    using Error::Error;
};

} // namespace lanekit
