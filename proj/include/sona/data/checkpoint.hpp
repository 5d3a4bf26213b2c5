#pragma once

#include <string>

#include "sona/data/archive.hpp"
#include "sona/nn/param_block.hpp"

namespace sona::data {

/// Adds every parameter of `block` as "<prefix>.<name>".
void add_params(Archive& archive, const std::string& prefix, const nn::ParamBlock& block);

/// Loads "<prefix>.<name>" for every parameter of `block`; missing or mis-shaped entries are format errors.
void load_params(const Archive& archive, const std::string& prefix, nn::ParamBlock& block);

}  // namespace sona::data
