#pragma once

#include <stdexcept>
#include <string>

namespace iseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions disagree.
class ShapeError : public Error {
   public:
    using Error::Error;
};

/// An argument violates a documented precondition.
class PreconditionError : public Error {
   public:
    using Error::Error;
};

/// Input is valid in shape but numerically degenerate (e.g. an all-zero prediction for SMSE).
class DegenerateInputError : public Error {
   public:
    using Error::Error;
};

/// An integer id (class label, head index, ...) is outside its allowed range.
class RangeError : public Error {
   public:
    using Error::Error;
};

/// A binary or text file does not follow its format.
class FormatError : public Error {
   public:
    using Error::Error;
};

class IoError : public Error {
   public:
    using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
   public:
    using Error::Error;
};

/// Misuse of the autodiff graph (backward without a recorded forward, double backward).
class GraphError : public Error {
   public:
    using Error::Error;
};

/// Dataset and configuration (or model) cannot be used together.
class CompatibilityError : public Error {
   public:
    using Error::Error;
};

/// A checkpoint does not match the network or data it is used with.
class CheckpointMismatchError : public Error {
   public:
    using Error::Error;
};

}  // namespace iseg
