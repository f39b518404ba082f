#pragma once

// Self-describing model container: versioned header with the spec, tensor
// directory, normalization stats and training metadata, followed by raw
// little-endian parameter data. Save/load round-trips are bit-identical.

#include <string>

#include "ovrn/model.hpp"

namespace ovrn {

void save_model(Model<float>& model, const std::string& path);
Model<float> load_model(const std::string& path);

}  // namespace ovrn
