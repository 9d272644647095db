#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "mfas/nn.hpp"
#include "mfas/tensor.hpp"

namespace mfas {

// Versioned keyed container of named tensors plus a JSON config section.
struct Checkpoint {
  std::string kind;
  nlohmann::json config;
  std::map<std::string, Tensor> tensors;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  void put_params(const ParamRefs& params);
  // shape-checked restore by name; throws StateError on missing or mismatched
  void restore_params(const ParamRefs& params) const;
};

}  // namespace mfas
