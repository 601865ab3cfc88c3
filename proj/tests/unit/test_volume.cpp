#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "lmk/landmarks.hpp"
#include "lmk/volume.hpp"
#include "support/oracles.hpp"
#include "support/tempdir.hpp"

using namespace lmk;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected lmk::Error");
    return ErrorCode::InvalidArgument;
}

// Hand-built single-file NIfTI-1 with an int16 payload and intensity scaling.
void write_int16_nifti(const std::filesystem::path& p, Index3 dims, const std::vector<std::int16_t>& values,
                       float slope, float inter) {
    std::vector<char> hdr(352, 0);
    auto put = [&](std::size_t off, auto v) { std::memcpy(hdr.data() + off, &v, sizeof(v)); };
    put(0, std::int32_t{348});
    put(40, std::int16_t{3});
    put(42, static_cast<std::int16_t>(dims[0]));
    put(44, static_cast<std::int16_t>(dims[1]));
    put(46, static_cast<std::int16_t>(dims[2]));
    put(70, std::int16_t{4});
    put(72, std::int16_t{16});
    put(80, 2.0f);
    put(84, 3.0f);
    put(88, 4.0f);
    put(108, 352.0f);
    put(112, slope);
    put(116, inter);
    std::memcpy(hdr.data() + 344, "n+1\0", 4);
    std::ofstream out(p, std::ios::binary);
    out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 2));
}

}  // namespace

TEST_CASE("volume indexing is x fastest and world mapping is affine") {
    Volume3D v({4, 3, 2}, {0.5, 1.0, 2.0}, {10.0, 20.0, 30.0});
    CHECK(v.index(1, 0, 0) == 1);
    CHECK(v.index(0, 1, 0) == 4);
    CHECK(v.index(0, 0, 1) == 12);
    const Vec3 w = v.voxel_to_world({2.0, 1.0, 1.0});
    CHECK(w[0] == doctest::Approx(11.0));
    CHECK(w[1] == doctest::Approx(21.0));
    CHECK(w[2] == doctest::Approx(32.0));
    const Vec3 back = v.world_to_voxel(w);
    CHECK(back[0] == doctest::Approx(2.0));
    CHECK(v.nearest_voxel({10.26, 20.4, 31.0}) == Index3{1, 0, 1});
}

TEST_CASE("trilinear sampling reproduces a ramp and is zero outside") {
    const auto v = oracle::ramp_volume({6, 5, 4}, {1, 1, 1}, {0, 0, 0}, 1.0, 10.0, 100.0, 3.0);
    CHECK(v.sample_linear({2.25, 1.5, 2.75}) == doctest::Approx(2.25 + 15.0 + 275.0 + 3.0));
    CHECK(v.sample_linear({3.0, 2.0, 1.0}) == doctest::Approx(v.at(3, 2, 1)));
    CHECK(v.sample_linear({-5.0, 1.0, 1.0}) == 0.0);
}

TEST_CASE("volume construction validates its invariants") {
    CHECK(code_of([] { Volume3D({0, 2, 2}, {1, 1, 1}); }) == ErrorCode::BadDimensions);
    CHECK(code_of([] { Volume3D({2, 2, 2}, {1, 1, 1}, {0, 0, 0}, std::vector<float>(7)); }) ==
          ErrorCode::ShapeMismatch);
    CHECK(code_of([] { Volume3D({2, 2, 2}, {1, -1, 1}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("intensity normalization maps robust range onto [0, 1] and keeps zeros") {
    std::vector<float> data(1000);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(i);
    Volume3D v({10, 10, 10}, {1, 1, 1}, {0, 0, 0}, data);
    const auto n = normalize_intensity(v);
    // 999 nonzero values 1..999: percentiles at rank 0.005*998 and 0.995*998.
    const double lo = 1.0 + 0.005 * 998.0, hi = 1.0 + 0.995 * 998.0;
    CHECK(n.at(0, 0, 0) == 0.0f);
    CHECK(n.data()[500] == doctest::Approx((500.0 - lo) / (hi - lo)).epsilon(1e-6));
    CHECK(n.data()[1] == 0.0f);
    CHECK(n.data()[999] == 1.0f);
    CHECK(code_of([] { normalize_intensity(Volume3D({2, 2, 2}, {1, 1, 1})); }) == ErrorCode::EmptyInput);
}

TEST_CASE("NIfTI float32 round trip is exact") {
    test::TempDir dir;
    Volume3D v({5, 4, 3}, {0.5, 0.75, 1.25}, {-3.0, 2.0, 7.5});
    for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(std::sin(0.37 * static_cast<double>(i)));
    save_nifti(v, dir / "a.nii");
    const auto r = load_nifti(dir / "a.nii");
    CHECK(r.dims() == v.dims());
    CHECK(r.spacing() == v.spacing());
    CHECK(r.origin() == v.origin());
    CHECK(r.data() == v.data());
    const auto via_dispatch = load_volume(dir / "a.nii");
    CHECK(via_dispatch.data() == v.data());
}

TEST_CASE("NIfTI int16 payload honours slope and intercept") {
    test::TempDir dir;
    std::vector<std::int16_t> vals{0, 1, -2, 300, 7, 8, 9, 10};
    write_int16_nifti(dir / "s.nii", {2, 2, 2}, vals, 0.5f, 1.0f);
    const auto v = load_nifti(dir / "s.nii");
    CHECK(v.spacing() == Vec3{2.0, 3.0, 4.0});
    for (std::size_t i = 0; i < vals.size(); ++i) CHECK(v.data()[i] == doctest::Approx(0.5 * vals[i] + 1.0));
}

TEST_CASE("malformed NIfTI files are rejected with distinct codes") {
    test::TempDir dir;
    Volume3D v({3, 3, 3}, {1, 1, 1});
    v.at(1, 1, 1) = 1.0f;
    save_nifti(v, dir / "ok.nii");
    const auto bytes = oracle::read_bytes(dir / "ok.nii");
    auto write = [&](const std::string& name, std::vector<char> b) {
        std::ofstream(dir / name, std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
        return dir / name;
    };

    CHECK(code_of([&] { load_nifti(dir / "missing.nii"); }) == ErrorCode::FileOpen);
    CHECK(code_of([&] { load_nifti(write("short.nii", std::vector<char>(bytes.begin(), bytes.begin() + 100))); }) ==
          ErrorCode::TruncatedPayload);
    CHECK(code_of([&] { load_nifti(write("trunc.nii", std::vector<char>(bytes.begin(), bytes.end() - 4))); }) ==
          ErrorCode::TruncatedPayload);
    auto bad_magic = bytes;
    bad_magic[345] = 'x';
    CHECK(code_of([&] { load_nifti(write("magic.nii", bad_magic)); }) == ErrorCode::BadMagic);
    auto big_endian = bytes;
    std::swap(big_endian[0], big_endian[3]);
    std::swap(big_endian[1], big_endian[2]);
    CHECK(code_of([&] { load_nifti(write("be.nii", big_endian)); }) == ErrorCode::BadMagic);
    auto dtype = bytes;
    dtype[70] = 2;
    dtype[71] = 0;
    CHECK(code_of([&] { load_nifti(write("u8.nii", dtype)); }) == ErrorCode::UnsupportedDatatype);
    auto four_d = bytes;
    four_d[40] = 4;
    CHECK(code_of([&] { load_nifti(write("4d.nii", four_d)); }) == ErrorCode::BadDimensions);
    CHECK(code_of([&] { load_volume(dir / "x.nii.gz"); }) == ErrorCode::UnsupportedDatatype);
}

TEST_CASE("raw volume manifest round trip is exact") {
    test::TempDir dir;
    Volume3D v({7, 2, 3}, {0.5, 0.5, 0.5}, {1.0, -1.0, 0.25});
    for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = 0.1f * static_cast<float>(i) - 1.0f;
    save_raw_volume(v, dir / "v.vol");
    const auto r = load_volume(dir / "v.vol");
    CHECK(r.dims() == v.dims());
    CHECK(r.origin() == v.origin());
    CHECK(r.data() == v.data());
}

TEST_CASE("landmark CSV round trip and validation") {
    test::TempDir dir;
    LandmarkSet s;
    s.add("L02", {1.5, -2.25, 3.0});
    s.add("L01", {0.1, 0.2, 0.30000000000000004});
    save_landmarks_csv(s, dir / "l.csv");
    const auto r = load_landmarks_csv(dir / "l.csv");
    CHECK(r == s);
    CHECK(r.sorted_ids() == std::vector<std::string>{"L01", "L02"});
    CHECK(r.at("L01")[2] == 0.30000000000000004);

    CHECK(code_of([&] { s.add("L01", {0, 0, 0}); }) == ErrorCode::DuplicateId);
    {
        std::ofstream(dir / "nocol.csv") << "id,x_mm,y_mm\nA,1,2\n";
    }
    CHECK(code_of([&] { load_landmarks_csv(dir / "nocol.csv"); }) == ErrorCode::MissingColumn);
    {
        std::ofstream(dir / "bad.csv") << "id,x_mm,y_mm,z_mm\nA,1,zz,2\n";
    }
    CHECK(code_of([&] { load_landmarks_csv(dir / "bad.csv"); }) == ErrorCode::Parse);
}

TEST_CASE("paired landmark sets must share ids") {
    LandmarkPairSet p;
    p.subject_id = "s";
    p.mri.add("A", {0, 0, 0});
    p.us.add("B", {0, 0, 0});
    CHECK(code_of([&] { p.validate(); }) == ErrorCode::IdMismatch);
}

TEST_CASE("pair manifest round trip resolves relative paths") {
    test::TempDir dir;
    std::vector<SubjectEntry> entries{{"s1", dir / "s1/mri.vol", dir / "s1/us.vol", dir / "s1/m.csv", dir / "s1/u.csv"}};
    save_pair_manifest(entries, dir / "pairs.csv");
    const auto r = load_pair_manifest(dir / "pairs.csv");
    REQUIRE(r.size() == 1);
    CHECK(r[0].subject_id == "s1");
    CHECK(std::filesystem::weakly_canonical(r[0].us_volume) == std::filesystem::weakly_canonical(dir / "s1/us.vol"));
}
