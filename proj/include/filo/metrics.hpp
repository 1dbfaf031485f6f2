#pragma once

#include <cstdint>
#include <span>

namespace filo {

// Rank-based AUROC (Mann-Whitney U), ties counted one half. Throws MetricError
// unless both classes are present.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

}  // namespace filo
