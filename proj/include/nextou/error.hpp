#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nextou {

enum class ErrorCode {
    invalid_argument,
    config_error,
    corrupted_record,
    generation_error,
    numerical_error,
    io_error,
    unknown_component,
};

std::string_view error_code_name(ErrorCode code);

/// Base of every error thrown by the library; carries a stable code that the
/// CLI prints as a machine-parseable token.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

class InvalidArgument : public Error {
public:
    explicit InvalidArgument(const std::string& message)
        : Error(ErrorCode::invalid_argument, message) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message) : Error(ErrorCode::config_error, message) {}
};

class CorruptedRecord : public Error {
public:
    explicit CorruptedRecord(const std::string& message)
        : Error(ErrorCode::corrupted_record, message) {}
};

class GenerationError : public Error {
public:
    explicit GenerationError(const std::string& message)
        : Error(ErrorCode::generation_error, message) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& message)
        : Error(ErrorCode::numerical_error, message) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error(ErrorCode::io_error, message) {}
};

}  // namespace nextou
