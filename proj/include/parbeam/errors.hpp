#pragma once

#include <stdexcept>
#include <string>

namespace parbeam {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A nonzero pixel would leave the reconstruction disk.
class SupportViolation : public Error {
public:
    using Error::Error;
};

/// A materialization or dense factorization would exceed its memory cap.
class ResourceLimit : public Error {
public:
    using Error::Error;
};

/// Caller broke an API contract (e.g. backward without a recorded forward).
class ContractViolation : public Error {
public:
    using Error::Error;
};

class UndefinedMetric : public Error {
public:
    using Error::Error;
};

class CalibrationFailed : public Error {
public:
    using Error::Error;
};

class TrainingDiverged : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace parbeam
