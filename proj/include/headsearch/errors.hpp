#pragma once

#include <stdexcept>
#include <string>

namespace headsearch {

// Shape mismatch between operands of a tensor op.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A documented precondition was violated by the caller.
struct PreconditionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Empty or malformed task data.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A HeadConfig failed validation; what() lists every violation.
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace headsearch
