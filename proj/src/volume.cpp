#include "longseg/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

static_assert(std::endian::native == std::endian::little,
              "LVOL/LSEG I/O assumes a little-endian host");

namespace longseg {

namespace {

constexpr char kLvolMagic[4] = {'L', 'V', 'O', 'L'};
constexpr char kLsegMagic[4] = {'L', 'S', 'E', 'G'};
constexpr std::uint8_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("truncated file: " + path);
  return v;
}

void check_no_trailing(std::istream& is, const std::string& path) {
  is.peek();
  if (!is.eof()) throw FormatError("trailing bytes after data: " + path);
}

}  // namespace

void Volume::validate(bool require_finite) const {
  if (nx <= 0 || ny <= 0 || nz <= 0 || nc < 1)
    throw DataError("volume dimensions must be positive");
  for (double s : spacing)
    if (!(s > 0.0)) throw DataError("volume spacing must be positive");
  if (data.size() != size())
    throw DataError("volume data length does not match dimensions");
  if (require_finite) {
    for (double v : data)
      if (!std::isfinite(v)) throw DataError("volume contains non-finite values");
  }
}

Volume read_lvol(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kLvolMagic, 4) != 0)
    throw FormatError("bad LVOL magic in " + path);
  if (get<std::uint8_t>(f, path) != kVersion)
    throw FormatError("unsupported LVOL version in " + path);

  Volume v;
  v.nx = static_cast<int>(get<std::uint32_t>(f, path));
  v.ny = static_cast<int>(get<std::uint32_t>(f, path));
  v.nz = static_cast<int>(get<std::uint32_t>(f, path));
  v.nc = static_cast<int>(get<std::uint32_t>(f, path));
  for (int a = 0; a < 3; ++a) v.spacing[a] = get<float>(f, path);
  if (v.nx <= 0 || v.ny <= 0 || v.nz <= 0 || v.nc <= 0)
    throw FormatError("invalid LVOL dimensions in " + path);

  const std::size_t n = v.size();
  std::vector<float> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
  if (!f) throw FormatError("truncated LVOL data in " + path);
  check_no_trailing(f, path);

  v.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(buf[i])) throw DataError("non-finite value in " + path);
    v.data[i] = buf[i];
  }
  return v;
}

void write_lvol(const Volume& v, const std::string& path) {
  v.validate();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(kLvolMagic, 4);
  put<std::uint8_t>(f, kVersion);
  put<std::uint32_t>(f, static_cast<std::uint32_t>(v.nx));
  put<std::uint32_t>(f, static_cast<std::uint32_t>(v.ny));
  put<std::uint32_t>(f, static_cast<std::uint32_t>(v.nz));
  put<std::uint32_t>(f, static_cast<std::uint32_t>(v.nc));
  for (int a = 0; a < 3; ++a) put<float>(f, static_cast<float>(v.spacing[a]));
  for (double d : v.data) put<float>(f, static_cast<float>(d));
  if (!f) throw IoError("write failed for " + path);
}

LabelVolume read_lseg(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kLsegMagic, 4) != 0)
    throw FormatError("bad LSEG magic in " + path);
  if (get<std::uint8_t>(f, path) != kVersion)
    throw FormatError("unsupported LSEG version in " + path);

  LabelVolume v;
  v.nx = static_cast<int>(get<std::uint32_t>(f, path));
  v.ny = static_cast<int>(get<std::uint32_t>(f, path));
  v.nz = static_cast<int>(get<std::uint32_t>(f, path));
  v.lesion_label = get<std::uint32_t>(f, path);
  for (int a = 0; a < 3; ++a) v.spacing[a] = get<float>(f, path);
  if (v.nx <= 0 || v.ny <= 0 || v.nz <= 0)
    throw FormatError("invalid LSEG dimensions in " + path);

  const std::size_t n = v.voxels();
  v.labels.resize(n);
  f.read(reinterpret_cast<char*>(v.labels.data()),
         static_cast<std::streamsize>(n * 2));
  if (!f) throw FormatError("truncated LSEG data in " + path);
  check_no_trailing(f, path);
  return v;
}

void write_lseg(const LabelVolume& v, const std::string& path) {
  if (v.labels.size() != v.voxels())
    throw DataError("label data length does not match dimensions");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(kLsegMagic, 4);
  put<std::uint8_t>(f, kVersion);
  put<std::uint32_t>(f, static_cast<std::uint32_t>(v.nx));
  put<std::uint32_t>(f, static_cast<std::uint32_t>(v.ny));
  put<std::uint32_t>(f, static_cast<std::uint32_t>(v.nz));
  put<std::uint32_t>(f, v.lesion_label);
  for (int a = 0; a < 3; ++a) put<float>(f, static_cast<float>(v.spacing[a]));
  f.write(reinterpret_cast<const char*>(v.labels.data()),
          static_cast<std::streamsize>(v.labels.size() * 2));
  if (!f) throw IoError("write failed for " + path);
}

Volume log_transform(const Volume& v, double epsilon) {
  v.validate();
  if (!(epsilon > 0.0)) throw DataError("log_transform epsilon must be positive");
  Volume out = v;
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    if (v.data[i] < 0.0) throw DataError("negative intensity in log_transform");
    out.data[i] = std::log(std::max(v.data[i], epsilon));
  }
  return out;
}

}  // namespace longseg
