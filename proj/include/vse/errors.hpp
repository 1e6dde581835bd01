#pragma once

#include <stdexcept>
#include <string>

namespace vse {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse: mismatched dimensions, invalid configuration values.
struct ContractError : Error {
    using Error::Error;
};

// Numerically invalid input (e.g. non-positive variance).
struct DomainError : Error {
    using Error::Error;
};

struct SimulationDiverged : Error {
    int step;
    explicit SimulationDiverged(int step_index)
        : Error("simulation diverged at step " + std::to_string(step_index)), step(step_index) {}
};

// Signal power is zero; SMNR calibration is undefined.
struct DegenerateSignal : Error {
    using Error::Error;
};

// All particle weights underflowed.
struct DegenerateFilter : Error {
    using Error::Error;
};

// Metric undefined (e.g. zero-energy truth sequence).
struct DegenerateMetric : Error {
    using Error::Error;
};

// A gradient became non-finite; carries the parameter name.
struct TrainingInstability : Error {
    std::string param_name;
    explicit TrainingInstability(const std::string& name)
        : Error("non-finite gradient for parameter '" + name + "'"), param_name(name) {}
};

struct TrainingDiverged : Error {
    int epoch;
    explicit TrainingDiverged(int at_epoch)
        : Error("training loss became non-finite at epoch " + std::to_string(at_epoch)),
          epoch(at_epoch) {}
};

// File format problems, each distinct so callers can tell them apart.
struct FileFormatError : Error {
    using Error::Error;
};
struct VersionError : FileFormatError {
    using FileFormatError::FileFormatError;
};
struct TruncationError : FileFormatError {
    using FileFormatError::FileFormatError;
};
struct ChecksumError : FileFormatError {
    using FileFormatError::FileFormatError;
};

}  // namespace vse
