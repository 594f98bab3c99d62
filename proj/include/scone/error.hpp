#ifndef SCONE_ERROR_HPP_
#define SCONE_ERROR_HPP_

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace scone {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SCONE_DEFINE_ERROR(Name)          \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

SCONE_DEFINE_ERROR(DuplicateAttribute);
SCONE_DEFINE_ERROR(InvalidType);
SCONE_DEFINE_ERROR(UnknownAttribute);
SCONE_DEFINE_ERROR(ParseError);
SCONE_DEFINE_ERROR(EmptySplit);
SCONE_DEFINE_ERROR(InvalidConfig);
SCONE_DEFINE_ERROR(ShapeError);
SCONE_DEFINE_ERROR(ImageLoadError);
SCONE_DEFINE_ERROR(EmptyEvaluation);
SCONE_DEFINE_ERROR(VocabMismatch);
SCONE_DEFINE_ERROR(CheckpointError);
SCONE_DEFINE_ERROR(TrainingDiverged);

#undef SCONE_DEFINE_ERROR

using WarningSink = std::function<void(std::string_view)>;

inline WarningSink& warning_sink() {
  static WarningSink sink = [](std::string_view msg) {
    std::cerr << "[scone] warning: " << msg << '\n';
  };
  return sink;
}

inline void warn(std::string_view msg) {
  if (warning_sink()) warning_sink()(msg);
}

/// Silences warnings for the lifetime of the guard (tests, tight loops).
class ScopedWarningSink {
 public:
  explicit ScopedWarningSink(WarningSink sink) : saved_(warning_sink()) {
    warning_sink() = std::move(sink);
  }
  ~ScopedWarningSink() { warning_sink() = std::move(saved_); }
  ScopedWarningSink(const ScopedWarningSink&) = delete;
  ScopedWarningSink& operator=(const ScopedWarningSink&) = delete;

 private:
  WarningSink saved_;
};

inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace scone

#endif  // SCONE_ERROR_HPP_
