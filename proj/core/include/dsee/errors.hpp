#pragma once

#include <stdexcept>
#include <string>

namespace dsee {

/// Root of the library error hierarchy.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Incompatible matrix/tensor dimensions.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Argument outside its documented range (rank, cardinality, ratio, method tag).
class ParameterError : public Error {
public:
    explicit ParameterError(const std::string& msg) : Error(msg) {}
};

/// Invalid data fed into an operation (non-finite entries, token id out of range).
class InputError : public Error {
public:
    explicit InputError(const std::string& msg) : Error(msg) {}
};

/// Numerically rank-deficient input to an orthonormalization step.
class DegenerateInputError : public Error {
public:
    explicit DegenerateInputError(const std::string& msg) : Error(msg) {}
};

/// Unrecognized magic bytes or unsupported archive version.
class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

/// Structurally inconsistent archive contents (offsets, lengths, dtypes).
class CorruptionError : public Error {
public:
    explicit CorruptionError(const std::string& msg) : Error(msg) {}
};

/// Filesystem-level failure (open, read, write, rename).
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

/// Optimization failure, e.g. non-finite gradients.
class TrainingError : public Error {
public:
    explicit TrainingError(const std::string& msg) : Error(msg) {}
};

/// End-to-end pipeline failure (stage could not meet its contract).
class PipelineError : public Error {
public:
    explicit PipelineError(const std::string& msg) : Error(msg) {}
};

} // namespace dsee
