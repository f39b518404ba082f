#pragma once

// Flat key=value experiment configuration: '#' comments, every key optional
// with a default, unknown keys rejected.

#include <string>

#include "ovrn/eval.hpp"

namespace ovrn {

ExperimentConfig parse_config_text(const std::string& text,
                                   const std::string& origin = "<config>");
ExperimentConfig parse_config_file(const std::string& path);

// Every effective key, sorted, suitable for echoing next to the results.
std::string format_config(const ExperimentConfig& cfg);

}  // namespace ovrn
