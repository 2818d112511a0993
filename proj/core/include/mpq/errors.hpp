#pragma once

#include <stdexcept>
#include <string>

namespace mpq {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
    kSuccess = 0,
    kUsage = 1,
    kData = 2,
    kDiverged = 3,
    kInfeasible = 4,
};

/// Base of every error raised by the library. Each subclass carries the exit
/// code the CLI reports when it escapes to the top level.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what, ExitCode code = ExitCode::kData)
        : std::runtime_error(what), code_(code) {}

    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

#define MPQ_DEFINE_ERROR(Name, Code)                                   \
    class Name : public Error {                                        \
    public:                                                            \
        explicit Name(const std::string& what) : Error(what, Code) {}  \
    }

MPQ_DEFINE_ERROR(ShapeError, ExitCode::kData);
MPQ_DEFINE_ERROR(IndexError, ExitCode::kData);
MPQ_DEFINE_ERROR(DegenerateInputError, ExitCode::kData);
MPQ_DEFINE_ERROR(MissingDependencyError, ExitCode::kData);
MPQ_DEFINE_ERROR(NumericalError, ExitCode::kData);
MPQ_DEFINE_ERROR(StateMismatchError, ExitCode::kData);
MPQ_DEFINE_ERROR(EmptyInputError, ExitCode::kData);
MPQ_DEFINE_ERROR(DegenerateScaleError, ExitCode::kData);
MPQ_DEFINE_ERROR(IncompatibleError, ExitCode::kData);
MPQ_DEFINE_ERROR(FormatError, ExitCode::kData);
MPQ_DEFINE_ERROR(DataError, ExitCode::kData);
MPQ_DEFINE_ERROR(ConfigError, ExitCode::kUsage);
MPQ_DEFINE_ERROR(TrainingDivergedError, ExitCode::kDiverged);
MPQ_DEFINE_ERROR(InfeasibleBudgetError, ExitCode::kInfeasible);

#undef MPQ_DEFINE_ERROR

}  // namespace mpq
