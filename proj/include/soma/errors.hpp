#pragma once

#include <stdexcept>
#include <string>

namespace soma {

/// Shape, level or value contract violated by a caller.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Inconsistent or incomplete run/model configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Missing, truncated or unreadable input file.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A metric was asked to reduce over an empty set.
class DegenerateInputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss term.
class NonFiniteLossError : public std::runtime_error {
public:
    NonFiniteLossError(std::string term, const std::string& what)
        : std::runtime_error(what), term_(std::move(term)) {}
    const std::string& term() const noexcept { return term_; }

private:
    std::string term_;
};

} // namespace soma
