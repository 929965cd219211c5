#pragma once

#include <stdexcept>
#include <string>

namespace frailt {

// Base for every error raised by the library. Each subclass names one
// failure family so callers (and the CLI's exit-code mapping) can dispatch.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define FRAILT_DEFINE_ERROR(Name)                 \
    class Name : public Error {                   \
    public:                                       \
        using Error::Error;                       \
    }

FRAILT_DEFINE_ERROR(DimensionError);
FRAILT_DEFINE_ERROR(IndexError);
FRAILT_DEFINE_ERROR(EvaluationError);
FRAILT_DEFINE_ERROR(ConfigError);
FRAILT_DEFINE_ERROR(ParseError);
FRAILT_DEFINE_ERROR(VocabError);
FRAILT_DEFINE_ERROR(DataError);
FRAILT_DEFINE_ERROR(BudgetError);
FRAILT_DEFINE_ERROR(TrainingError);
FRAILT_DEFINE_ERROR(FormatError);
FRAILT_DEFINE_ERROR(IntegrityError);
FRAILT_DEFINE_ERROR(ContextError);
FRAILT_DEFINE_ERROR(ValidationError);
FRAILT_DEFINE_ERROR(EvalError);
FRAILT_DEFINE_ERROR(AggregationError);
FRAILT_DEFINE_ERROR(FitError);

#undef FRAILT_DEFINE_ERROR

}  // namespace frailt
