#pragma once

#include <stdexcept>
#include <string>

namespace gradmerge {

// Validation errors map to CLI exit code 1, numeric failures to exit code 2.
enum class ErrorKind { validation, numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define GRADMERGE_DEFINE_ERROR(Name, Kind)                                        \
  class Name : public Error {                                                     \
   public:                                                                        \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, #Name ": " + what) {} \
  }

GRADMERGE_DEFINE_ERROR(LayoutError, validation);
GRADMERGE_DEFINE_ERROR(ConfigError, validation);
GRADMERGE_DEFINE_ERROR(IoError, validation);
GRADMERGE_DEFINE_ERROR(CorruptCheckpointError, validation);
GRADMERGE_DEFINE_ERROR(MissingCurvatureError, validation);
GRADMERGE_DEFINE_ERROR(EmptyMergeError, validation);
GRADMERGE_DEFINE_ERROR(EmptyDataError, validation);
GRADMERGE_DEFINE_ERROR(UnsupportedModelError, validation);
GRADMERGE_DEFINE_ERROR(UnsupportedError, validation);

GRADMERGE_DEFINE_ERROR(NumericError, numeric);
GRADMERGE_DEFINE_ERROR(DivergenceError, numeric);
GRADMERGE_DEFINE_ERROR(SingularCurvatureError, numeric);
GRADMERGE_DEFINE_ERROR(SingularSystemError, numeric);

#undef GRADMERGE_DEFINE_ERROR

}  // namespace gradmerge
