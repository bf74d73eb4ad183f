#pragma once

#include <stdexcept>
#include <string>

namespace parenting {

// Base for everything the library throws on purpose. The CLI maps each
// subclass onto a distinct exit status.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class InputError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class InternalError : public Error {
public:
    using Error::Error;
};

class GenerationError : public Error {
public:
    using Error::Error;
};

// Checkpoint loading failures. Each condition gets its own type so callers
// can tell a stale file from a damaged one.
class LoadError : public IoError {
public:
    using IoError::IoError;
};

class VersionMismatchError : public LoadError {
public:
    using LoadError::LoadError;
};

class TruncatedFileError : public LoadError {
public:
    using LoadError::LoadError;
};

class DimensionMismatchError : public LoadError {
public:
    using LoadError::LoadError;
};

class StageDependencyError : public Error {
public:
    StageDependencyError(std::string stage, const std::string& what)
        : Error(what), stage_(std::move(stage)) {}
    const std::string& missing_stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace parenting
