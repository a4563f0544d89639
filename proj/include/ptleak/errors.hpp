#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace ptleak {

// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define PTLEAK_DEFINE_ERROR(NAME)                                   \
  class NAME : public Error {                                       \
   public:                                                          \
    explicit NAME(const std::string& msg) : Error(msg) {}           \
  }

PTLEAK_DEFINE_ERROR(ShapeError);            // dimension / input-shape mismatch
PTLEAK_DEFINE_ERROR(NumericError);          // NaN or inf where finite required
PTLEAK_DEFINE_ERROR(LabelError);            // class label out of range
PTLEAK_DEFINE_ERROR(EmptyDataError);        // empty dataset where data required
PTLEAK_DEFINE_ERROR(ScheduleError);         // epoch outside schedule range
PTLEAK_DEFINE_ERROR(SpecError);             // invalid distribution spec
PTLEAK_DEFINE_ERROR(SizeError);             // count/size precondition violated
PTLEAK_DEFINE_ERROR(StrategyError);         // invalid finetune strategy
PTLEAK_DEFINE_ERROR(ClassCountError);       // invalid class count
PTLEAK_DEFINE_ERROR(ConfigError);           // invalid or inconsistent config
PTLEAK_DEFINE_ERROR(FitError);              // too few samples for a fit
PTLEAK_DEFINE_ERROR(DegenerateSplitError);  // all-IN or all-OUT shadow split
PTLEAK_DEFINE_ERROR(TrainingError);         // metaclassifier preconditions
PTLEAK_DEFINE_ERROR(IdError);               // unknown point id
PTLEAK_DEFINE_ERROR(MaskError);             // top-k out of range
PTLEAK_DEFINE_ERROR(MetricError);           // metric preconditions
PTLEAK_DEFINE_ERROR(InputError);            // other bad argument
PTLEAK_DEFINE_ERROR(LoadError);             // checkpoint / artifact load failure

#undef PTLEAK_DEFINE_ERROR

// Carries the pipeline stage a failure occurred in plus the run's master seed,
// so batch runs can report where they died.
class StageError : public Error {
 public:
  StageError(std::string stage, uint64_t master_seed, const std::string& msg)
      : Error("stage '" + stage + "' failed (master_seed=" +
              std::to_string(master_seed) + "): " + msg),
        stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace ptleak
