#pragma once

#include <stdexcept>
#include <string>

namespace cbvp {

// Every library failure derives from Error so the CLI can map it to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define CBVP_DEFINE_ERROR(Name)                \
    class Name : public Error {                \
    public:                                    \
        using Error::Error;                    \
    };

CBVP_DEFINE_ERROR(SingularityError)
CBVP_DEFINE_ERROR(StepLimitError)
CBVP_DEFINE_ERROR(DomainError)
CBVP_DEFINE_ERROR(NoSolutionError)
CBVP_DEFINE_ERROR(EmptySplitError)
CBVP_DEFINE_ERROR(ShapeError)
CBVP_DEFINE_ERROR(NonFiniteError)
CBVP_DEFINE_ERROR(TooShortError)
CBVP_DEFINE_ERROR(LengthMismatchError)
CBVP_DEFINE_ERROR(InsufficientDataError)
CBVP_DEFINE_ERROR(FormatError)
CBVP_DEFINE_ERROR(IoError)

#undef CBVP_DEFINE_ERROR

// Configuration errors are user errors (exit code 1), not runtime failures.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

} // namespace cbvp
