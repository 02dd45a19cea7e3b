// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace bilingunet {

// Base of every error raised by the library. `kind()` is a stable lowercase
// tag used by the CLI for machine-parsable error lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define BILINGUNET_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(tag, what) {}           \
  }

BILINGUNET_DEFINE_ERROR(DimensionError, "dimension");
BILINGUNET_DEFINE_ERROR(ParameterError, "parameter");
BILINGUNET_DEFINE_ERROR(ContractError, "contract");
BILINGUNET_DEFINE_ERROR(ConfigError, "config");
BILINGUNET_DEFINE_ERROR(VocabError, "vocab");
BILINGUNET_DEFINE_ERROR(GenerationError, "generation");
BILINGUNET_DEFINE_ERROR(LoadError, "load");
BILINGUNET_DEFINE_ERROR(IoError, "io");
BILINGUNET_DEFINE_ERROR(FormatError, "format");
BILINGUNET_DEFINE_ERROR(VersionError, "version");
BILINGUNET_DEFINE_ERROR(TrainingError, "training");

#undef BILINGUNET_DEFINE_ERROR

}  // namespace bilingunet
