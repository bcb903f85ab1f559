// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace kvlab {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define KVLAB_DEFINE_ERROR(Name, Base)                 \
    class Name : public Base {                         \
    public:                                            \
        using Base::Base;                              \
    }

KVLAB_DEFINE_ERROR(ConfigError, Error);
KVLAB_DEFINE_ERROR(LengthError, Error);
KVLAB_DEFINE_ERROR(BudgetError, Error);
KVLAB_DEFINE_ERROR(SegmentationError, Error);
KVLAB_DEFINE_ERROR(RetentionError, Error);
KVLAB_DEFINE_ERROR(SelectionError, Error);
KVLAB_DEFINE_ERROR(TraceError, Error);
KVLAB_DEFINE_ERROR(ValidationError, Error);
KVLAB_DEFINE_ERROR(DegenerateCurveError, ValidationError);
KVLAB_DEFINE_ERROR(ArithmeticError, Error);

// I/O and on-disk format problems. The CLI maps these to exit code 2.
KVLAB_DEFINE_ERROR(IoError, Error);
KVLAB_DEFINE_ERROR(FormatError, IoError);

#undef KVLAB_DEFINE_ERROR

}  // namespace kvlab
