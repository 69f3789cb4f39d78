#pragma once

#include <stdexcept>
#include <string>

namespace spotlight {

// Every library failure derives from Error. kind() is a stable token used by
// the CLI for its one-line machine-parseable error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define SPOTLIGHT_DEFINE_ERROR(Name, token)                                   \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& message) : Error(token, message) {}      \
  };

SPOTLIGHT_DEFINE_ERROR(DimensionError, "dimension")
SPOTLIGHT_DEFINE_ERROR(ParameterError, "parameter")
SPOTLIGHT_DEFINE_ERROR(IndexError, "index")
SPOTLIGHT_DEFINE_ERROR(ContractError, "contract")
SPOTLIGHT_DEFINE_ERROR(UnreliableCheckError, "unreliable_check")
SPOTLIGHT_DEFINE_ERROR(ConfigError, "config")
SPOTLIGHT_DEFINE_ERROR(FormatError, "format")
SPOTLIGHT_DEFINE_ERROR(LengthError, "length")
SPOTLIGHT_DEFINE_ERROR(VocabularyError, "vocabulary")
SPOTLIGHT_DEFINE_ERROR(UnlabeledPathwayError, "unlabeled_pathway")
SPOTLIGHT_DEFINE_ERROR(SpecError, "spec")
SPOTLIGHT_DEFINE_ERROR(UndefinedRatioError, "undefined_ratio")
SPOTLIGHT_DEFINE_ERROR(SplitError, "split")
SPOTLIGHT_DEFINE_ERROR(DivergenceError, "divergence")
SPOTLIGHT_DEFINE_ERROR(UsageError, "usage")
SPOTLIGHT_DEFINE_ERROR(IoError, "io")

#undef SPOTLIGHT_DEFINE_ERROR

}  // namespace spotlight
