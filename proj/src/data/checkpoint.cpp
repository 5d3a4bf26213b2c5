#include "sona/data/checkpoint.hpp"

#include "sona/core/error.hpp"

namespace sona::data {

void add_params(Archive& archive, const std::string& prefix, const nn::ParamBlock& block) {
  for (const auto& [name, t] : block.snapshot()) archive.add(prefix + "." + name, t);
}

void load_params(const Archive& archive, const std::string& prefix, nn::ParamBlock& block) {
  std::vector<std::pair<std::string, Tensor>> values;
  for (const auto& [name, var] : block.entries()) {
    const std::string key = prefix + "." + name;
    if (!archive.contains(key)) throw FormatError("checkpoint is missing parameter '" + key + "'");
    values.emplace_back(name, archive.tensor(key));
  }
  block.load_values(values);
}

}  // namespace sona::data
