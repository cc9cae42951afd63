#pragma once

#include <stdexcept>
#include <string>

namespace infovla {

// Shape / dimension mismatch between tensor operands.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Argument outside its declared domain (e.g. flow time outside [0,1]).
struct DomainError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A documented precondition was violated by the caller.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// NaN/Inf surfaced by an operation; never silently propagated.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid experiment configuration; message names the offending field.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace infovla
