#pragma once

#include <stdexcept>
#include <string>

namespace nimg {

// All library errors derive from Error so callers can catch broadly; each
// subtype names one failure class.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define NIMG_DEFINE_ERROR(Name)            \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

NIMG_DEFINE_ERROR(ShapeError);
NIMG_DEFINE_ERROR(UnsupportedOp);
NIMG_DEFINE_ERROR(NonScalarLoss);
NIMG_DEFINE_ERROR(EvalError);
NIMG_DEFINE_ERROR(ConfigError);
NIMG_DEFINE_ERROR(DomainError);
NIMG_DEFINE_ERROR(IndexError);
NIMG_DEFINE_ERROR(GroupError);
NIMG_DEFINE_ERROR(FormatError);
NIMG_DEFINE_ERROR(CorruptCheckpoint);
NIMG_DEFINE_ERROR(NoBucket);
NIMG_DEFINE_ERROR(ProtocolError);
NIMG_DEFINE_ERROR(EmptySelection);

#undef NIMG_DEFINE_ERROR

class RowError : public Error {
 public:
  RowError(std::string row_id, const std::string& what)
      : Error("row '" + row_id + "': " + what), row_id_(std::move(row_id)) {}
  const std::string& row_id() const noexcept { return row_id_; }

 private:
  std::string row_id_;
};

class MissingRecord : public Error {
 public:
  explicit MissingRecord(int step)
      : Error("no routing record for step " + std::to_string(step)), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

}  // namespace nimg
