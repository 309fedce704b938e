#pragma once

#include <stdexcept>
#include <string>

namespace cdb {

/// Base of every error raised by the library. Callers that only care about
/// "something in cdb failed" catch this; tests catch the concrete kinds.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CDB_DEFINE_ERROR(Name)                       \
  class Name : public Error {                        \
   public:                                           \
    explicit Name(const std::string& what)           \
        : Error(std::string(#Name ": ") + what) {}   \
  }

CDB_DEFINE_ERROR(InvalidShape);
CDB_DEFINE_ERROR(NonFinite);
CDB_DEFINE_ERROR(DegenerateInput);
CDB_DEFINE_ERROR(IndexError);
CDB_DEFINE_ERROR(AllDropped);
CDB_DEFINE_ERROR(InvalidState);
CDB_DEFINE_ERROR(InvalidConfig);
CDB_DEFINE_ERROR(DegenerateBatch);
CDB_DEFINE_ERROR(InvalidLabel);
CDB_DEFINE_ERROR(ScheduleExhausted);
CDB_DEFINE_ERROR(FormatError);
CDB_DEFINE_ERROR(CorruptRecord);
CDB_DEFINE_ERROR(SpecError);
CDB_DEFINE_ERROR(CheckpointError);
CDB_DEFINE_ERROR(DivergedRun);
CDB_DEFINE_ERROR(ConfigError);

#undef CDB_DEFINE_ERROR

}  // namespace cdb
