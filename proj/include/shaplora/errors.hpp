#pragma once

#include <stdexcept>
#include <string>

namespace shaplora {

// Base of every error thrown by the library. Subclasses name the failure
// category so callers (notably the CLI) can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SHAPLORA_DEFINE_ERROR(Name) \
  class Name : public Error {       \
   public:                          \
    using Error::Error;             \
  };

SHAPLORA_DEFINE_ERROR(DimensionError)
SHAPLORA_DEFINE_ERROR(NumericError)
SHAPLORA_DEFINE_ERROR(ContractError)
SHAPLORA_DEFINE_ERROR(ConfigError)
SHAPLORA_DEFINE_ERROR(StateError)
SHAPLORA_DEFINE_ERROR(KeyError)
SHAPLORA_DEFINE_ERROR(BudgetError)
SHAPLORA_DEFINE_ERROR(CapacityError)
SHAPLORA_DEFINE_ERROR(DataError)
SHAPLORA_DEFINE_ERROR(TrainingError)
SHAPLORA_DEFINE_ERROR(ScheduleError)
SHAPLORA_DEFINE_ERROR(IntegrityError)
SHAPLORA_DEFINE_ERROR(ParseError)

#undef SHAPLORA_DEFINE_ERROR

}  // namespace shaplora
