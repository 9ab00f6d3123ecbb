#pragma once

#include <string>

#include "longseg/volume.hpp"

namespace longseg {

/// Minimal single-file NIfTI-1 reader. Supports uint8/int16/float32/float64
/// data, applies scl_slope/scl_inter when scl_slope != 0, honors vox_offset.
Volume read_nifti_minimal(const std::string& path);

}  // namespace longseg
