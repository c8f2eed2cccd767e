#include "calora/error.hpp"

namespace calora {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
      return 2;
    case ErrorKind::kDimension:
    case ErrorKind::kIndex:
      return 3;
    case ErrorKind::kInheritance:
      return 4;
    case ErrorKind::kTraining:
      return 5;
    case ErrorKind::kIo:
      return 6;
    case ErrorKind::kContract:
    case ErrorKind::kInternal:
      return 1;
  }
  return 1;
}

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kIndex: return "index";
    case ErrorKind::kInheritance: return "inheritance";
    case ErrorKind::kTraining: return "training";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kContract: return "contract";
    case ErrorKind::kInternal: return "internal";
  }
  return "unknown";
}

void rethrow_with_context(const Error& e, const std::string& context) {
  const std::string msg = context + ": " + e.what();
  switch (e.kind()) {
    case ErrorKind::kConfig: throw ConfigError(msg);
    case ErrorKind::kDimension: throw DimensionError(msg);
    case ErrorKind::kIndex: throw IndexError(msg);
    case ErrorKind::kInheritance: throw InheritanceError(msg);
    case ErrorKind::kIo: throw IoError(msg);
    case ErrorKind::kContract: throw ContractError(msg);
    case ErrorKind::kTraining:
      if (const auto* t = dynamic_cast<const TrainingError*>(&e)) throw TrainingError(t->step(), msg);
      throw Error(ErrorKind::kTraining, msg);
    case ErrorKind::kInternal: break;
  }
  throw InternalError(msg);
}

}  // namespace calora
