#pragma once

#include <stdexcept>
#include <string>

namespace surrmeta {

/// Faults caused by the input data or run configuration (CLI exit code 1).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Faults raised inside the sampler (CLI exit code 2).
class SamplerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MalformedRow : public DataError {
 public:
  MalformedRow(std::size_t line, const std::string& detail)
      : DataError("MalformedRow: line " + std::to_string(line) + ": " + detail), line(line) {}
  std::size_t line;
};

class MissingColumn : public DataError {
 public:
  explicit MissingColumn(const std::string& name)
      : DataError("MissingColumn: " + name), column(name) {}
  std::string column;
};

class DuplicateContrast : public DataError {
 public:
  DuplicateContrast(const std::string& study, const std::string& contrast)
      : DataError("DuplicateContrast: study '" + study + "', contrast '" + contrast + "'"),
        study_id(study),
        contrast_id(contrast) {}
  std::string study_id;
  std::string contrast_id;
};

class UnknownTracer : public DataError {
 public:
  using DataError::DataError;
};

class NotPositiveSemiDefinite : public DataError {
 public:
  using DataError::DataError;
};

class InsufficientData : public DataError {
 public:
  using DataError::DataError;
};

class MixedOutcome : public DataError {
 public:
  using DataError::DataError;
};

class MixedScale : public DataError {
 public:
  using DataError::DataError;
};

class UnknownTreatment : public DataError {
 public:
  using DataError::DataError;
};

class SingleTreatment : public DataError {
 public:
  using DataError::DataError;
};

class TreatmentMismatch : public DataError {
 public:
  using DataError::DataError;
};

class EmptyRecords : public DataError {
 public:
  using DataError::DataError;
};

class InvalidDesign : public DataError {
 public:
  using DataError::DataError;
};

class UnknownParameter : public DataError {
 public:
  explicit UnknownParameter(const std::string& name) : DataError("UnknownParameter: " + name) {}
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class InitOutOfSupport : public SamplerError {
 public:
  using SamplerError::SamplerError;
};

class DivergentChain : public SamplerError {
 public:
  using SamplerError::SamplerError;
};

}  // namespace surrmeta
