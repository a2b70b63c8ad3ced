#pragma once

#include <stdexcept>
#include <string>

namespace idleak {

// Error hierarchy. Callers that need to distinguish failure modes catch the
// concrete class; everything derives from Error so the CLI can report any
// failure uniformly.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration or argument values (out-of-range params, bad enums).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Shape or channel-count mismatches between tensors/models.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Filesystem / container format failures.
class IoError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public IoError {
public:
    using IoError::IoError;
};

class TruncatedFileError : public IoError {
public:
    using IoError::IoError;
};

class DtypeError : public IoError {
public:
    using IoError::IoError;
};

// Pipeline cache integrity violation (artifact content does not match the
// hash recorded in a manifest).
class HashMismatchError : public Error {
public:
    using Error::Error;
};

}  // namespace idleak
