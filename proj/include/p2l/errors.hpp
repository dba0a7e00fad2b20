#pragma once

#include <stdexcept>

namespace p2l {

// Stale caches, frozen-model violations, checksum mismatches.
struct InvalidStateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed files: bad magic, truncated payloads, schema violations.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values produced where finiteness is an invariant.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A generation produced no usable explanation; the episode is dropped.
struct DegenerateOutputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Configuration problems (model/flow dimension mismatches, bad config files).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace p2l
