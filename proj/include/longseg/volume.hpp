#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "longseg/errors.hpp"

namespace longseg {

/// Dense multi-channel scalar grid. Data layout is x-fastest, then y, then z,
/// then channel; spacing is in mm. Immutable by convention once filled.
struct Volume {
  int nx = 0, ny = 0, nz = 0;
  int nc = 1;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<double> data;

  Volume() = default;
  Volume(int nx_, int ny_, int nz_, int nc_ = 1,
         std::array<double, 3> spacing_ = {1.0, 1.0, 1.0})
      : nx(nx_), ny(ny_), nz(nz_), nc(nc_), spacing(spacing_),
        data(static_cast<std::size_t>(nx_) * ny_ * nz_ * nc_, 0.0) {}

  std::size_t voxels() const { return static_cast<std::size_t>(nx) * ny * nz; }
  std::size_t size() const { return voxels() * nc; }

  std::size_t index(int x, int y, int z, int c = 0) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(ny) *
                    (static_cast<std::size_t>(z) +
                     static_cast<std::size_t>(nz) * static_cast<std::size_t>(c)));
  }

  double at(int x, int y, int z, int c = 0) const { return data[index(x, y, z, c)]; }
  double& at(int x, int y, int z, int c = 0) { return data[index(x, y, z, c)]; }

  bool same_geometry(const Volume& o) const {
    return nx == o.nx && ny == o.ny && nz == o.nz && nc == o.nc &&
           spacing == o.spacing;
  }

  /// Throws DataError if dimensions, spacing or data length are inconsistent,
  /// or (when require_finite) any value is non-finite.
  void validate(bool require_finite = true) const;
};

/// Voxelwise integer labels. Label 0 is background; the lesion label is
/// recorded explicitly so labels are never confused with intensities.
struct LabelVolume {
  int nx = 0, ny = 0, nz = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::uint32_t lesion_label = 0;
  std::vector<std::uint16_t> labels;

  LabelVolume() = default;
  LabelVolume(int nx_, int ny_, int nz_, std::uint32_t lesion,
              std::array<double, 3> spacing_ = {1.0, 1.0, 1.0})
      : nx(nx_), ny(ny_), nz(nz_), spacing(spacing_), lesion_label(lesion),
        labels(static_cast<std::size_t>(nx_) * ny_ * nz_, 0) {}

  std::size_t voxels() const { return static_cast<std::size_t>(nx) * ny * nz; }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
  }

  std::uint16_t at(int x, int y, int z) const { return labels[index(x, y, z)]; }
  std::uint16_t& at(int x, int y, int z) { return labels[index(x, y, z)]; }
};

// LVOL / LSEG container I/O (little-endian, f32 data / u16 labels).
Volume read_lvol(const std::string& path);
void write_lvol(const Volume& v, const std::string& path);
LabelVolume read_lseg(const std::string& path);
void write_lseg(const LabelVolume& v, const std::string& path);

/// out[i] = ln(max(v[i], epsilon)); rejects negative intensities.
Volume log_transform(const Volume& v, double epsilon = 1e-4);

}  // namespace longseg
