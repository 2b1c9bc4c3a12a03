#pragma once

#include <stdexcept>
#include <string>

namespace pscm {

// Base of every error thrown by the toolkit. `kind()` is a short stable tag
// used by the CLI when it reports a failed stage.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define PSCM_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(tag, what) {}      \
  };

PSCM_DEFINE_ERROR(ScheduleError, "schedule")
PSCM_DEFINE_ERROR(AlignmentError, "alignment")
PSCM_DEFINE_ERROR(SelectionError, "selection")
PSCM_DEFINE_ERROR(IngestionError, "ingestion")
PSCM_DEFINE_ERROR(ReferenceError, "reference")
PSCM_DEFINE_ERROR(ModelError, "model")
PSCM_DEFINE_ERROR(NumericError, "numeric")
PSCM_DEFINE_ERROR(DomainError, "domain")
PSCM_DEFINE_ERROR(ConfigurationError, "configuration")
PSCM_DEFINE_ERROR(PoolingError, "pooling")
PSCM_DEFINE_ERROR(DegenerateFitError, "degenerate-fit")
PSCM_DEFINE_ERROR(SpecError, "spec")
PSCM_DEFINE_ERROR(InferenceError, "inference")
PSCM_DEFINE_ERROR(ArtifactError, "artifact")

#undef PSCM_DEFINE_ERROR

// Schema violation in an input file; carries the location.
class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& column,
             const std::string& what)
      : Error("parse", file + ":" + std::to_string(line) +
                           (column.empty() ? std::string{} : " [" + column + "]") + ": " +
                           what),
        file_(file),
        line_(line),
        column_(column) {}

  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::string file_;
  std::size_t line_;
  std::string column_;
};

// Wraps an error raised inside a pipeline stage.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const Error& inner)
      : Error(inner.kind(), "[" + stage + "] " + inner.what()), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace pscm
