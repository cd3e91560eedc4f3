// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <stdexcept>
#include <string>

namespace lirf {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

class NumericError : public Error {
  public:
    using Error::Error;
};

class ChecksumError : public Error {
  public:
    using Error::Error;
};

class FormatError : public Error {
  public:
    using Error::Error;
};

class SpecMismatchError : public Error {
  public:
    using Error::Error;
};

class DataError : public Error {
  public:
    using Error::Error;
};

/// Invalid configuration value or key. `path()` is the dotted key path.
class ConfigError : public Error {
  public:
    ConfigError(std::string path, const std::string& what)
        : Error(path.empty() ? what : path + ": " + what), path_(std::move(path)), message_(what) {}
    const std::string& path() const noexcept { return path_; }
    const std::string& message() const noexcept { return message_; }

  private:
    std::string path_;
    std::string message_;
};

/// A pipeline stage was asked to run before the stage producing its inputs.
class PrerequisiteError : public Error {
  public:
    PrerequisiteError(std::string needed, const std::string& what)
        : Error(what), needed_(std::move(needed)) {}
    const std::string& needed_command() const noexcept { return needed_; }

  private:
    std::string needed_;
};

} // namespace lirf
