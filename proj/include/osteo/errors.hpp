#pragma once

#include <stdexcept>
#include <string>

namespace osteo {

// Base for every error raised by the library. The CLI maps each subclass
// to a distinct exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

#define OSTEO_DEFINE_ERROR(Name, Code)                      \
    class Name : public Error {                             \
    public:                                                 \
        using Error::Error;                                 \
        int exit_code() const noexcept override { return Code; } \
    }

OSTEO_DEFINE_ERROR(InvalidInput, 2);
OSTEO_DEFINE_ERROR(ShapeError, 2);
OSTEO_DEFINE_ERROR(EmptyMask, 4);
OSTEO_DEFINE_ERROR(NotFitted, 4);
OSTEO_DEFINE_ERROR(PatientIdError, 5);
OSTEO_DEFINE_ERROR(InfeasibleSplit, 6);
OSTEO_DEFINE_ERROR(DegenerateClassCounts, 7);
OSTEO_DEFINE_ERROR(UndefinedMetric, 7);
OSTEO_DEFINE_ERROR(ConfigError, 8);
OSTEO_DEFINE_ERROR(IncompatibleCheckpoint, 9);
OSTEO_DEFINE_ERROR(NonFiniteLoss, 10);
OSTEO_DEFINE_ERROR(IoError, 11);

#undef OSTEO_DEFINE_ERROR

}  // namespace osteo
