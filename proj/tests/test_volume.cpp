#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "longseg/volume.hpp"

using namespace longseg;

namespace {

std::string temp_path(const char* name) {
  return std::string("/tmp/longseg_test_") + name;
}

}  // namespace

TEST_CASE("lvol round-trip is bitwise identical") {
  Volume v(3, 4, 5, 2, {1.0, 1.5, 2.0});
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<float> u(0.0f, 100.0f);
  for (auto& d : v.data) d = u(rng);  // f32-representable values

  const std::string path = temp_path("roundtrip.lvol");
  write_lvol(v, path);
  const Volume r = read_lvol(path);
  CHECK(r.nx == v.nx);
  CHECK(r.ny == v.ny);
  CHECK(r.nz == v.nz);
  CHECK(r.nc == v.nc);
  CHECK(r.spacing[0] == doctest::Approx(1.0));
  CHECK(r.spacing[1] == doctest::Approx(1.5));
  for (std::size_t i = 0; i < v.data.size(); ++i) CHECK(r.data[i] == v.data[i]);

  // Writing the read-back volume again reproduces the file byte for byte.
  const std::string path2 = temp_path("roundtrip2.lvol");
  write_lvol(r, path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {});
  const std::string sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  CHECK(!sa.empty());
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("lvol rejects bad files") {
  const std::string path = temp_path("bad.lvol");
  SUBCASE("wrong magic") {
    std::ofstream(path, std::ios::binary) << "NOPE garbage";
    CHECK_THROWS_AS(read_lvol(path), FormatError);
  }
  SUBCASE("trailing bytes") {
    Volume v(2, 2, 2);
    write_lvol(v, path);
    std::ofstream(path, std::ios::binary | std::ios::app) << "x";
    CHECK_THROWS_AS(read_lvol(path), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(read_lvol(temp_path("does_not_exist.lvol")), IoError);
  }
  std::remove(path.c_str());
}

TEST_CASE("lvol refuses non-finite data") {
  Volume v(2, 2, 2);
  v.data[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(write_lvol(v, temp_path("nan.lvol")), DataError);
}

TEST_CASE("lseg round-trip preserves labels and lesion label") {
  LabelVolume v(4, 3, 2, 7, {2.0, 2.0, 2.0});
  for (std::size_t i = 0; i < v.labels.size(); ++i)
    v.labels[i] = static_cast<std::uint16_t>(i % 9);
  const std::string path = temp_path("roundtrip.lseg");
  write_lseg(v, path);
  const LabelVolume r = read_lseg(path);
  CHECK(r.lesion_label == 7);
  CHECK(r.spacing[0] == doctest::Approx(2.0));
  CHECK(r.labels == v.labels);
  std::remove(path.c_str());
}

TEST_CASE("log transform clamps at epsilon and rejects negatives") {
  Volume v(2, 1, 1);
  v.data = {1.0, 0.0};
  const Volume lt = log_transform(v, 1e-4);
  CHECK(lt.data[0] == doctest::Approx(0.0));
  CHECK(lt.data[1] == doctest::Approx(std::log(1e-4)));
  v.data[0] = -1.0;
  CHECK_THROWS_AS(log_transform(v), DataError);
}

TEST_CASE("volume validate catches inconsistent shapes") {
  Volume v(2, 2, 2);
  v.data.pop_back();
  CHECK_THROWS_AS(v.validate(), DataError);
}
