#pragma once

#include <functional>
#include <vector>

#include "fdmix/tensor.hpp"

namespace fdmix {

// A scalar-valued program over a fixed list of input tensors. The program is
// re-run with perturbed inputs, so it must be a pure function of them.
using ScalarProgram = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients against central finite differences.
// Returns max over all coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
double finite_diff_check(const ScalarProgram& program, const std::vector<Tensor>& point,
                         double eps = 1e-5);

// Full-pipeline check on a micro model: a 2-way 1-shot mixed batch is pushed
// through extract -> disentangle -> both classifier heads and the complete
// training loss; reverse-mode parameter gradients are compared against central
// finite differences on `coords_per_param` sampled coordinates of every
// parameter. Returns the max relative error.
double model_training_gradcheck(std::uint64_t seed, double eps = 1e-5, int coords_per_param = 4);

}  // namespace fdmix
