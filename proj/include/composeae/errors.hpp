#pragma once

#include <stdexcept>
#include <string>

namespace composeae {

/// Base for every error raised by the library. `kind()` is the stable,
/// machine-readable tag the CLI reports.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

/// A caller broke a precondition (shape mismatch, non-scalar loss, ...).
class ContractError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "contract_violation"; }
};

/// A NaN or infinity showed up where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "numeric"; }
};

/// Malformed dataset, checkpoint, or config file.
class FormatError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "format"; }
};

class UnsupportedVersionError : public FormatError {
public:
    using FormatError::FormatError;
    const char* kind() const noexcept override { return "unsupported_version"; }
};

/// Configuration is valid JSON but cannot be satisfied.
class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config"; }
};

class UsageError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "usage"; }
};

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ContractError(what);
}

}  // namespace composeae
