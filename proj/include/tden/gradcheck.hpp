#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tden/nn.hpp"

namespace tden {

struct GradCheckReport {
    std::vector<std::pair<std::string, double>> checks;  // name -> max rel error
    double max_error = 0.0;
    double seconds = 0.0;
};

// Finite-difference verification of every differentiable op, every block,
// each model path, each proxy objective, and the full joint objective on the
// given (tiny) config. Deterministic for a fixed seed.
GradCheckReport run_gradcheck_suite(const ModelConfig& cfg, std::uint64_t seed = 12345);

}  // namespace tden
