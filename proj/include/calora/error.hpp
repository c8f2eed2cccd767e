#pragma once

#include <stdexcept>
#include <string>

namespace calora {

// Process exit codes are part of the CLI contract.
enum class ErrorKind {
  kConfig,
  kDimension,
  kIndex,
  kInheritance,
  kTraining,
  kIo,
  kContract,
  kInternal,
};

int exit_code(ErrorKind kind);
const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

#define CALORA_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

CALORA_DEFINE_ERROR(ConfigError, kConfig)
CALORA_DEFINE_ERROR(DimensionError, kDimension)
CALORA_DEFINE_ERROR(IndexError, kIndex)
CALORA_DEFINE_ERROR(InheritanceError, kInheritance)
CALORA_DEFINE_ERROR(IoError, kIo)
CALORA_DEFINE_ERROR(ContractError, kContract)
CALORA_DEFINE_ERROR(InternalError, kInternal)

#undef CALORA_DEFINE_ERROR

// Training failures carry the optimizer step at which they happened.
class TrainingError : public Error {
 public:
  TrainingError(long step, const std::string& what)
      : Error(ErrorKind::kTraining, "step " + std::to_string(step) + ": " + what),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Rethrows `e` as the same error class with `context` prepended.
[[noreturn]] void rethrow_with_context(const Error& e, const std::string& context);

}  // namespace calora
