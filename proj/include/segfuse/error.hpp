#pragma once

#include <stdexcept>
#include <string>

namespace segfuse {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Config text problems: syntax, duplicate names, partial mappings.
struct ConfigError : Error {
    using Error::Error;
};

// Binary file format violations: bad magic, truncation, invariant breaches.
struct FormatError : Error {
    using Error::Error;
};

// In-memory shape or value mismatches: dimensions, channels, label ranges.
struct ShapeError : Error {
    using Error::Error;
};

// Missing or unusable inputs: empty datasets, unreadable directories.
struct DataError : Error {
    using Error::Error;
};

} // namespace segfuse
