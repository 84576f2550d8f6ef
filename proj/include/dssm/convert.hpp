// Rewrites a contiguous range of plain Mamba layers (expand = 2) as
// differential Mamba layers: the doubled inner channels of each source block
// split into the two paths (lower half = subtrahend, upper half = minuend),
// every source weight lands in exactly one path, and fresh lambda and norm
// parameters are initialized. Untouched layers are copied verbatim.

#pragma once

#include "dssm/checkpoint.hpp"

namespace dssm {

CheckpointData convert_mamba_to_diff(const CheckpointData& source, int64_t layer_begin, int64_t layer_end);

}  // namespace dssm
