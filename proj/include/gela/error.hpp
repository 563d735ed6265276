#pragma once

#include <stdexcept>
#include <string>

namespace gela {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct LengthError : Error {
    using Error::Error;
};
struct MaskError : Error {
    using Error::Error;
};
struct BoxError : Error {
    using Error::Error;
};
struct ShuffleError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct ParamError : Error {
    using Error::Error;
};
struct ActionError : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct SchemaError : Error {
    using Error::Error;
};
struct VersionError : Error {
    using Error::Error;
};
struct IndexError : Error {
    using Error::Error;
};

// Raised when a sampled batch item cannot be built (e.g. nothing to mask);
// the trainer drops the item and moves on.
struct SkipSignal : Error {
    using Error::Error;
};

}  // namespace gela
