#pragma once

#include <stdexcept>
#include <string>

namespace rsp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A documented precondition was violated by the caller.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// An operation needs more access than the model handle grants.
class CapabilityError : public Error {
public:
    using Error::Error;
};

/// The handle's query budget is exhausted.
class BudgetError : public Error {
public:
    using Error::Error;
};

/// A remote query failed after all retries.
class QueryError : public Error {
public:
    QueryError(const std::string& what, int attempts)
        : Error(what + " (after " + std::to_string(attempts) + " attempts)"), attempts_(attempts) {}

    int attempts() const noexcept { return attempts_; }

private:
    int attempts_;
};

/// Every candidate received zero probability.
class DegenerateDistributionError : public Error {
public:
    using Error::Error;
};

/// A file or document did not match the expected format.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace rsp
