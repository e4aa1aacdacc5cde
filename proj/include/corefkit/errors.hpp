#pragma once

#include <stdexcept>
#include <string>

namespace corefkit {

// Bad flags, bad config keys. The CLI maps this to exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Unreadable or malformed external data (corpus files, shards, checkpoints).
// The CLI maps this to exit code 2.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace corefkit
