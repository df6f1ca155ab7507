#pragma once

#include <stdexcept>
#include <string>

namespace selfq {

// Base class for every error this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shapes disagree with an op's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A computation produced NaN or infinity from finite inputs.
class NumericError : public Error {
public:
    using Error::Error;
};

// An index (token id, target class, ...) is out of range.
class IndexError : public Error {
public:
    using Error::Error;
};

// A configuration violates its invariants.
class ConfigError : public Error {
public:
    using Error::Error;
};

// A question does not parse against the closed template grammar.
class GrammarError : public Error {
public:
    using Error::Error;
};

// A question parses but is ill-posed for the given scene.
class OracleError : public Error {
public:
    using Error::Error;
};

// Scene resampling exhausted its retry budget.
class TaskGenError : public Error {
public:
    using Error::Error;
};

// A serialized record could not be parsed.
class ParseError : public Error {
public:
    using Error::Error;
};

// Structurally valid data violates a dataset/report invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

// A token stream does not fit the model's context window.
class LengthError : public Error {
public:
    using Error::Error;
};

// A sequence layout is missing a required segment.
class LayoutError : public Error {
public:
    using Error::Error;
};

// A checkpoint file failed integrity verification.
class ChecksumError : public Error {
public:
    using Error::Error;
};

// An evaluation was requested over zero examples.
class EmptyEvalError : public Error {
public:
    using Error::Error;
};

}  // namespace selfq
