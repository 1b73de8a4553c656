#pragma once

#include <stdexcept>
#include <string>

namespace diffem {

// Invalid input or configuration. The CLI maps it to exit code 1.
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Base class for numerical failures. The CLI maps these to exit code 2.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateCovariance : public NumericalError {
public:
    DegenerateCovariance(const std::string& what, int pivot)
        : NumericalError(what), pivot_(pivot) {}
    int pivot() const { return pivot_; }

private:
    int pivot_;
};

class SingularSystem : public NumericalError {
public:
    SingularSystem(const std::string& what, double condition)
        : NumericalError(what), condition_(condition) {}
    double condition() const { return condition_; }

private:
    double condition_;
};

class NotConverged : public NumericalError {
public:
    NotConverged(const std::string& what, int iterations)
        : NumericalError(what), iterations_(iterations) {}
    int iterations() const { return iterations_; }

private:
    int iterations_;
};

// Unreadable or corrupt image file.
class MalformedImage : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace diffem
