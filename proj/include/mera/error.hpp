#pragma once

#include <stdexcept>
#include <string>

namespace mera {

// Error taxonomy. Everything thrown by the library derives from Error so
// callers can catch one type at the CLI boundary and still write targeted
// catches in tests.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// shape or dimension mismatch in a kernel or layer
struct ShapeError : Error {
    using Error::Error;
};

// out-of-range index (batch row, class id, node id)
struct IndexError : Error {
    using Error::Error;
};

// operation called in the wrong order (backward before forward, step without grads)
struct StateError : Error {
    using Error::Error;
};

// bad argument value (negative fraction, empty order, unknown method id)
struct ArgumentError : Error {
    using Error::Error;
};

// config file or flag problems, message carries the offending key
struct ConfigError : Error {
    using Error::Error;
};

// checkpoint decode problems, message carries the byte offset
struct FormatError : Error {
    using Error::Error;
};

// NaN or Inf surfaced in a loss or parameter
struct NumericError : Error {
    using Error::Error;
};

} // namespace mera
