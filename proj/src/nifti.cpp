#include "longseg/nifti.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace longseg {

namespace {

// Field offsets within the 348-byte NIfTI-1 header.
constexpr int kSizeofHdr = 0;
constexpr int kDim = 40;        // short dim[8]
constexpr int kDatatype = 70;   // short
constexpr int kBitpix = 72;     // short
constexpr int kPixdim = 76;     // float pixdim[8]
constexpr int kVoxOffset = 108; // float
constexpr int kSclSlope = 112;  // float
constexpr int kSclInter = 116;  // float

constexpr std::int16_t DT_UINT8 = 2;
constexpr std::int16_t DT_INT16 = 4;
constexpr std::int16_t DT_FLOAT32 = 16;
constexpr std::int16_t DT_FLOAT64 = 64;

template <typename T>
T read_at(const std::vector<char>& hdr, int offset) {
  T v;
  std::memcpy(&v, hdr.data() + offset, sizeof(T));
  return v;
}

}  // namespace

Volume read_nifti_minimal(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);

  std::vector<char> hdr(348);
  f.read(hdr.data(), 348);
  if (!f) throw FormatError("file shorter than NIfTI-1 header: " + path);

  const auto sizeof_hdr = read_at<std::int32_t>(hdr, kSizeofHdr);
  if (sizeof_hdr != 348)
    throw FormatError("sizeof_hdr != 348 in " + path);

  std::int16_t dim[8];
  std::memcpy(dim, hdr.data() + kDim, sizeof(dim));
  if (dim[0] < 1 || dim[0] > 7)
    throw FormatError("invalid dim[0] in " + path);

  Volume v;
  v.nx = dim[0] >= 1 ? dim[1] : 1;
  v.ny = dim[0] >= 2 ? dim[2] : 1;
  v.nz = dim[0] >= 3 ? dim[3] : 1;
  v.nc = dim[0] >= 4 && dim[4] > 0 ? dim[4] : 1;
  if (v.nx <= 0 || v.ny <= 0 || v.nz <= 0)
    throw FormatError("non-positive spatial dims in " + path);

  float pixdim[8];
  std::memcpy(pixdim, hdr.data() + kPixdim, sizeof(pixdim));
  for (int a = 0; a < 3; ++a)
    v.spacing[a] = pixdim[a + 1] > 0.0f ? pixdim[a + 1] : 1.0;

  const auto datatype = read_at<std::int16_t>(hdr, kDatatype);
  (void)read_at<std::int16_t>(hdr, kBitpix);
  const float vox_offset = read_at<float>(hdr, kVoxOffset);
  const float scl_slope = read_at<float>(hdr, kSclSlope);
  const float scl_inter = read_at<float>(hdr, kSclInter);

  int elem_size;
  switch (datatype) {
    case DT_UINT8: elem_size = 1; break;
    case DT_INT16: elem_size = 2; break;
    case DT_FLOAT32: elem_size = 4; break;
    case DT_FLOAT64: elem_size = 8; break;
    default:
      throw FormatError("unsupported NIfTI datatype " +
                        std::to_string(datatype) + " in " + path);
  }

  // vox_offset < 348 (e.g. 0) means the data follows the header directly.
  const std::streamoff offset =
      vox_offset >= 348.0f ? static_cast<std::streamoff>(vox_offset) : 348;
  f.seekg(offset, std::ios::beg);

  const std::size_t n = v.size();
  std::vector<char> raw(n * elem_size);
  f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!f) throw FormatError("truncated NIfTI data in " + path);

  v.data.resize(n);
  const double slope = scl_slope != 0.0f ? scl_slope : 1.0;
  const double inter = scl_slope != 0.0f ? scl_inter : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double raw_val;
    switch (datatype) {
      case DT_UINT8: {
        std::uint8_t x;
        std::memcpy(&x, raw.data() + i, 1);
        raw_val = x;
        break;
      }
      case DT_INT16: {
        std::int16_t x;
        std::memcpy(&x, raw.data() + i * 2, 2);
        raw_val = x;
        break;
      }
      case DT_FLOAT32: {
        float x;
        std::memcpy(&x, raw.data() + i * 4, 4);
        raw_val = x;
        break;
      }
      default: {
        double x;
        std::memcpy(&x, raw.data() + i * 8, 8);
        raw_val = x;
        break;
      }
    }
    v.data[i] = slope * raw_val + inter;
  }
  return v;
}

}  // namespace longseg
