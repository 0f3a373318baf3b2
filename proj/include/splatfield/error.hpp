// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace splatfield {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or non-finite on-disk data.
class ParseError : public Error {
public:
    using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// A scene with zero Gaussians where at least one is required.
class EmptySceneError : public Error {
public:
    using Error::Error;
};

/// Inputs that violate a documented precondition (shapes, indices, modes).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// More identity classes requested than orthogonal codes can hold.
class CapacityError : public Error {
public:
    using Error::Error;
};

/// Non-finite training loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace splatfield
