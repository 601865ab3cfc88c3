#include "lmk/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "lmk/log.hpp"
#include "lmk/parallel.hpp"
#include "lmk/random.hpp"
#include "lmk/sift3d.hpp"

namespace lmk {

namespace {

constexpr double kTwoPi = 6.283185307179586;
constexpr double kMinSeparationMm = 8.0;
constexpr double kFanMarginMm = 12.0;
constexpr double kBorderMarginMm = 14.0;
constexpr double kMaskedFraction = 0.30;
constexpr double kInversionGain = 1.6;
constexpr double kSpeckleScale = 0.25;
constexpr int kPlacementAttempts = 8;

struct Blob {
    Vec3 center;
    Vec3 sigma;
    double amplitude;
    int cls;
};

struct Tube {
    Vec3 p0, p1, p2;  // quadratic Bezier control points
    double radius;
    double amplitude;
};

Vec3 random_unit(Rng& rng) {
    for (;;) {
        const Vec3 v{rng.normal(), rng.normal(), rng.normal()};
        const double n = norm(v);
        if (n > 1e-9) return (1.0 / n) * v;
    }
}

Vec3 extent_of(const SynthSpec& spec) {
    return {(spec.dims[0] - 1) * spec.spacing_mm, (spec.dims[1] - 1) * spec.spacing_mm, (spec.dims[2] - 1) * spec.spacing_mm};
}

Deformation draw_deformation(const SynthSpec& spec, Rng& rng) {
    const Vec3 e = extent_of(spec);
    Deformation d;
    for (int c = 0; c < 3; ++c) d.center[static_cast<std::size_t>(c)] = rng.uniform(0.25, 0.75) * e[static_cast<std::size_t>(c)];
    for (auto& axis : d.modes) {
        for (auto& m : axis) {
            m.amplitude = rng.uniform(0.2, 1.0);
            const double wavelength = rng.uniform(40.0, 120.0);
            m.omega = (kTwoPi / wavelength) * random_unit(rng);
        }
    }
    const double raw = d.max_magnitude();
    for (auto& axis : d.modes) {
        for (auto& m : axis) m.amplitude *= spec.max_shift_mm / raw;
    }
    return d;
}

// Renders blobs into `total` and the blobs of class `inverted` into `inv`.
void render_blobs(const std::vector<Blob>& blobs, int inverted, const SynthSpec& spec, std::vector<float>& total,
                  std::vector<float>& inv) {
    const double s = spec.spacing_mm;
    const auto& d = spec.dims;
    parallel_for(static_cast<std::size_t>(d[2]), [&](std::size_t zi) {
        const int z = static_cast<int>(zi);
        const double pz = z * s;
        for (const auto& b : blobs) {
            const double dz = (pz - b.center[2]) / b.sigma[2];
            if (std::abs(dz) > 3.0) continue;
            const int y0 = std::max(0, static_cast<int>(std::floor((b.center[1] - 3 * b.sigma[1]) / s)));
            const int y1 = std::min(d[1] - 1, static_cast<int>(std::ceil((b.center[1] + 3 * b.sigma[1]) / s)));
            const int x0 = std::max(0, static_cast<int>(std::floor((b.center[0] - 3 * b.sigma[0]) / s)));
            const int x1 = std::min(d[0] - 1, static_cast<int>(std::ceil((b.center[0] + 3 * b.sigma[0]) / s)));
            for (int y = y0; y <= y1; ++y) {
                const double dy = (y * s - b.center[1]) / b.sigma[1];
                for (int x = x0; x <= x1; ++x) {
                    const double dx = (x * s - b.center[0]) / b.sigma[0];
                    const float v = static_cast<float>(b.amplitude * std::exp(-0.5 * (dx * dx + dy * dy + dz * dz)));
                    const std::size_t i = static_cast<std::size_t>(x) +
                                          static_cast<std::size_t>(d[0]) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(d[1]) * zi);
                    total[i] += v;
                    if (b.cls == inverted) inv[i] += v;
                }
            }
        }
    });
}

// Tubes are the running maximum of Gaussian spheres splatted along the curve.
void render_tubes(const std::vector<Tube>& tubes, const SynthSpec& spec, std::vector<float>& total) {
    const double s = spec.spacing_mm;
    const auto& d = spec.dims;
    std::vector<std::vector<std::pair<Vec3, const Tube*>>> samples(tubes.size());
    for (std::size_t t = 0; t < tubes.size(); ++t) {
        const auto& tb = tubes[t];
        const double len = distance(tb.p0, tb.p1) + distance(tb.p1, tb.p2);
        const int n = std::max(2, static_cast<int>(std::ceil(len / (0.25 * s))));
        for (int k = 0; k <= n; ++k) {
            const double u = static_cast<double>(k) / n;
            const Vec3 p = ((1 - u) * (1 - u)) * tb.p0 + (2 * u * (1 - u)) * tb.p1 + (u * u) * tb.p2;
            samples[t].push_back({p, &tb});
        }
    }
    parallel_for(static_cast<std::size_t>(d[2]), [&](std::size_t zi) {
        const double pz = static_cast<double>(zi) * s;
        std::vector<float> slice(static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]), 0.0f);
        for (const auto& list : samples) {
            for (const auto& [c, tb] : list) {
                const double reach = 3.0 * tb->radius;
                if (std::abs(pz - c[2]) > reach) continue;
                const int y0 = std::max(0, static_cast<int>(std::floor((c[1] - reach) / s)));
                const int y1 = std::min(d[1] - 1, static_cast<int>(std::ceil((c[1] + reach) / s)));
                const int x0 = std::max(0, static_cast<int>(std::floor((c[0] - reach) / s)));
                const int x1 = std::min(d[0] - 1, static_cast<int>(std::ceil((c[0] + reach) / s)));
                const double inv2r2 = 1.0 / (2.0 * tb->radius * tb->radius);
                for (int y = y0; y <= y1; ++y) {
                    for (int x = x0; x <= x1; ++x) {
                        const Vec3 q{x * s, y * s, pz};
                        const Vec3 r = q - c;
                        const float v = static_cast<float>(tb->amplitude * std::exp(-dot(r, r) * inv2r2));
                        float& o = slice[static_cast<std::size_t>(x) + static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(y)];
                        o = std::max(o, v);
                    }
                }
            }
        }
        const std::size_t base = slice.size() * zi;
        for (std::size_t i = 0; i < slice.size(); ++i) total[base + i] += slice[i];
    });
}

// US image at y is the source image at x with x + d(x) = y; the inverse map
// is solved by fixed-point iteration on a 2-voxel lattice and interpolated.
std::vector<float> warp_forward(const Volume3D& src, const Deformation& def) {
    const auto& d = src.dims();
    const double s = src.spacing()[0];
    constexpr int stride = 2;
    const Index3 nodes{(d[0] - 1 + stride - 1) / stride + 1, (d[1] - 1 + stride - 1) / stride + 1,
                       (d[2] - 1 + stride - 1) / stride + 1};
    std::vector<Vec3> back(static_cast<std::size_t>(nodes[0]) * nodes[1] * nodes[2]);
    parallel_for(static_cast<std::size_t>(nodes[2]), [&](std::size_t k) {
        for (int j = 0; j < nodes[1]; ++j) {
            for (int i = 0; i < nodes[0]; ++i) {
                const Vec3 y{i * stride * s, j * stride * s, static_cast<double>(k) * stride * s};
                Vec3 x = y;
                for (int it = 0; it < 30; ++it) x = y - evaluate_deformation(def, x);
                back[static_cast<std::size_t>(i) + static_cast<std::size_t>(nodes[0]) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(nodes[1]) * k)] = y - x;
            }
        }
    });
    auto node = [&](int i, int j, int k) -> const Vec3& {
        return back[static_cast<std::size_t>(i) + static_cast<std::size_t>(nodes[0]) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(nodes[1]) * static_cast<std::size_t>(k))];
    };

    std::vector<float> out(src.size());
    parallel_for(static_cast<std::size_t>(d[2]), [&](std::size_t zi) {
        const int z = static_cast<int>(zi);
        for (int y = 0; y < d[1]; ++y) {
            for (int x = 0; x < d[0]; ++x) {
                const int i0 = x / stride, j0 = y / stride, k0 = z / stride;
                const double fx = static_cast<double>(x % stride) / stride, fy = static_cast<double>(y % stride) / stride,
                             fz = static_cast<double>(z % stride) / stride;
                Vec3 u{0.0, 0.0, 0.0};
                for (int c = 0; c < 8; ++c) {
                    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
                    const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                    if (w == 0.0) continue;
                    u = u + w * node(std::min(i0 + dx, nodes[0] - 1), std::min(j0 + dy, nodes[1] - 1), std::min(k0 + dz, nodes[2] - 1));
                }
                Vec3 v{x - u[0] / s, y - u[1] / s, z - u[2] / s};
                for (int a = 0; a < 3; ++a) {
                    v[static_cast<std::size_t>(a)] = std::clamp(v[static_cast<std::size_t>(a)], 0.0, d[static_cast<std::size_t>(a)] - 1.0);
                }
                out[src.index(x, y, z)] = static_cast<float>(src.sample_linear(v));
            }
        }
    });
    return out;
}

FanMask fit_fan(const SynthSpec& spec, Rng& rng) {
    const Vec3 e = extent_of(spec);
    FanMask fan;
    fan.apex = {0.5 * e[0] + rng.uniform(-4.0, 4.0), 0.5 * e[1] + rng.uniform(-4.0, 4.0), e[2] + 20.0};
    fan.axis = {0.0, 0.0, -1.0};
    const double s = spec.spacing_mm;
    auto masked_fraction = [&](double angle) {
        FanMask f = fan;
        f.half_angle = angle;
        long total = 0, outside = 0;
        for (int z = 0; z < spec.dims[2]; z += 2) {
            for (int y = 0; y < spec.dims[1]; y += 2) {
                for (int x = 0; x < spec.dims[0]; x += 2) {
                    ++total;
                    outside += !f.inside({x * s, y * s, z * s});
                }
            }
        }
        return static_cast<double>(outside) / static_cast<double>(total);
    };
    double lo = 0.01, hi = 1.5;
    for (int it = 0; it < 40; ++it) {
        const double mid = 0.5 * (lo + hi);
        (masked_fraction(mid) > kMaskedFraction ? lo : hi) = mid;
    }
    fan.half_angle = 0.5 * (lo + hi);
    return fan;
}

bool inside_margin(const Vec3& p, const Vec3& extent, double margin) {
    for (int a = 0; a < 3; ++a) {
        const double v = p[static_cast<std::size_t>(a)];
        if (v < margin || v > extent[static_cast<std::size_t>(a)] - margin) return false;
    }
    return true;
}

std::vector<Vec3> place_landmarks(const Volume3D& mri, const SynthSpec& spec, const Deformation& def, const FanMask& fan) {
    const Volume3D smooth = gaussian_blur(mri, 1.0);
    const auto& d = smooth.dims();
    const std::size_t n = smooth.size();
    std::vector<float> grad(n, 0.0f);
    parallel_for(static_cast<std::size_t>(d[2]), [&](std::size_t zi) {
        const int z = static_cast<int>(zi);
        if (z < 1 || z > d[2] - 2) return;
        for (int y = 1; y < d[1] - 1; ++y) {
            for (int x = 1; x < d[0] - 1; ++x) {
                const double gx = smooth.at(x + 1, y, z) - smooth.at(x - 1, y, z);
                const double gy = smooth.at(x, y + 1, z) - smooth.at(x, y - 1, z);
                const double gz = smooth.at(x, y, z + 1) - smooth.at(x, y, z - 1);
                grad[smooth.index(x, y, z)] = static_cast<float>(0.5 * std::sqrt(gx * gx + gy * gy + gz * gz));
            }
        }
    });

    const Vec3 e = extent_of(spec);
    struct Candidate {
        float g;
        std::size_t index;
        Vec3 p;
    };
    std::vector<std::vector<Candidate>> per_slice(static_cast<std::size_t>(d[2]));
    parallel_for(per_slice.size(), [&](std::size_t zi) {
        const int z = static_cast<int>(zi);
        if (z < 2 || z > d[2] - 3) return;
        for (int y = 2; y < d[1] - 2; ++y) {
            for (int x = 2; x < d[0] - 2; ++x) {
                const std::size_t i = smooth.index(x, y, z);
                const float g = grad[i];
                if (!(g > 0.0f)) continue;
                bool is_max = true;
                for (int dz = -1; dz <= 1 && is_max; ++dz) {
                    for (int dy = -1; dy <= 1 && is_max; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            if ((dx || dy || dz) && grad[smooth.index(x + dx, y + dy, z + dz)] >= g) {
                                is_max = false;
                                break;
                            }
                        }
                    }
                }
                if (!is_max) continue;
                const Vec3 p = smooth.voxel_to_world({static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)});
                const Vec3 q = p + evaluate_deformation(def, p);
                if (!inside_margin(p, e, kBorderMarginMm) || !inside_margin(q, e, kBorderMarginMm - spec.max_shift_mm)) continue;
                if (fan.depth(p) < kFanMarginMm || fan.depth(q) < kFanMarginMm) continue;
                per_slice[zi].push_back({g, i, p});
            }
        }
    });
    std::vector<Candidate> all;
    for (auto& v : per_slice) all.insert(all.end(), v.begin(), v.end());
    std::sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
        return a.g != b.g ? a.g > b.g : a.index < b.index;
    });

    std::vector<Vec3> chosen;
    for (const auto& c : all) {
        if (static_cast<int>(chosen.size()) == spec.n_landmarks) break;
        const bool far = std::all_of(chosen.begin(), chosen.end(),
                                     [&](const Vec3& o) { return distance(o, c.p) >= kMinSeparationMm; });
        if (far) chosen.push_back(c.p);
    }
    return chosen;
}

}  // namespace

void SynthSpec::validate() const {
    for (int v : dims) {
        if (v < 32) throw Error(ErrorCode::InvalidArgument, "synthetic volumes need at least 32 voxels per axis");
    }
    if (!(spacing_mm > 0.0) || n_blobs < 0 || n_tubes < 0 || n_landmarks < 1 || !(max_shift_mm >= 0.0)) {
        throw Error(ErrorCode::InvalidArgument, "invalid synthetic spec");
    }
}

double Deformation::max_magnitude() const {
    double ss = 0.0;
    for (const auto& axis : modes) {
        double s = 0.0;
        for (const auto& m : axis) s += m.amplitude;
        ss += s * s;
    }
    return std::sqrt(ss);
}

Vec3 evaluate_deformation(const Deformation& d, const Vec3& p) {
    const Vec3 r = p - d.center;
    Vec3 out{0.0, 0.0, 0.0};
    for (std::size_t c = 0; c < 3; ++c) {
        for (const auto& m : d.modes[c]) {
            if (m.amplitude != 0.0) out[c] += m.amplitude * std::cos(dot(m.omega, r));
        }
    }
    return out;
}

bool FanMask::inside(const Vec3& p) const {
    const Vec3 r = p - apex;
    const double h = dot(r, axis);
    if (h <= 0.0) return false;
    return norm(r - h * axis) <= h * std::tan(half_angle);
}

double FanMask::depth(const Vec3& p) const {
    const Vec3 r = p - apex;
    const double h = dot(r, axis);
    const double rho = norm(r - h * axis);
    return h * std::sin(half_angle) - rho * std::cos(half_angle);
}

SynthSubject generate_subject(const SynthSpec& spec) {
    spec.validate();
    const double s = spec.spacing_mm;
    const Vec3 e = extent_of(spec);
    const std::size_t n = static_cast<std::size_t>(spec.dims[0]) * spec.dims[1] * spec.dims[2];

    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
        Rng rng(derive_seed(spec.seed, 0x5e7, static_cast<std::uint64_t>(attempt)));

        std::array<DeformationMode, 3> background;
        std::array<double, 3> phase{};
        for (std::size_t k = 0; k < 3; ++k) {
            background[k].amplitude = 0.05;
            background[k].omega = (kTwoPi / rng.uniform(30.0, 80.0)) * random_unit(rng);
            phase[k] = rng.uniform(0.0, kTwoPi);
        }
        const std::array<double, 3> class_amp{0.9, 0.55, -0.4};
        std::vector<Blob> blobs(static_cast<std::size_t>(spec.n_blobs));
        for (auto& b : blobs) {
            for (std::size_t a = 0; a < 3; ++a) {
                b.center[a] = rng.uniform(4.0, e[a] - 4.0);
                b.sigma[a] = rng.uniform(1.5, 4.0);
            }
            b.cls = static_cast<int>(rng.below(3));
            b.amplitude = class_amp[static_cast<std::size_t>(b.cls)] * rng.uniform(0.8, 1.2);
        }
        const int inverted = static_cast<int>(rng.below(3));
        std::vector<Tube> tubes(static_cast<std::size_t>(spec.n_tubes));
        for (auto& t : tubes) {
            for (std::size_t a = 0; a < 3; ++a) {
                t.p0[a] = rng.uniform(0.0, e[a]);
                t.p1[a] = rng.uniform(0.0, e[a]);
                t.p2[a] = rng.uniform(0.0, e[a]);
            }
            t.radius = rng.uniform(0.7, 1.6);
            t.amplitude = rng.uniform(0.5, 0.8);
        }
        const Deformation def = draw_deformation(spec, rng);
        const FanMask fan = fit_fan(spec, rng);
        const double gamma = rng.uniform(0.6, 1.6);
        const Vec3 blur_sigma{rng.uniform(1.0, 2.0), rng.uniform(1.0, 2.0), rng.uniform(1.0, 2.0)};
        const std::uint64_t speckle_seed = rng.next_u64();

        std::vector<float> raw(n, 0.0f), inv(n, 0.0f);
        parallel_for(static_cast<std::size_t>(spec.dims[2]), [&](std::size_t zi) {
            for (int y = 0; y < spec.dims[1]; ++y) {
                for (int x = 0; x < spec.dims[0]; ++x) {
                    const Vec3 p{x * s, y * s, static_cast<double>(zi) * s};
                    double v = 0.15;
                    for (std::size_t k = 0; k < 3; ++k) v += background[k].amplitude * std::cos(dot(background[k].omega, p) + phase[k]);
                    raw[static_cast<std::size_t>(x) + static_cast<std::size_t>(spec.dims[0]) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(spec.dims[1]) * zi)] =
                        static_cast<float>(v);
                }
            }
        });
        render_blobs(blobs, inverted, spec, raw, inv);
        render_tubes(tubes, spec, raw);

        const Vec3 spacing{s, s, s};
        Volume3D mri = normalize_intensity(Volume3D(spec.dims, spacing, {0.0, 0.0, 0.0}, raw));

        const auto landmarks = place_landmarks(mri, spec, def, fan);
        if (static_cast<int>(landmarks.size()) < spec.n_landmarks) {
            log::debug("landmark placement attempt " + std::to_string(attempt) + " found " +
                       std::to_string(landmarks.size()) + " of " + std::to_string(spec.n_landmarks));
            continue;
        }

        std::vector<float> altered(n);
        for (std::size_t i = 0; i < n; ++i) altered[i] = raw[i] - static_cast<float>(kInversionGain) * inv[i];
        Volume3D us_src(spec.dims, spacing, {0.0, 0.0, 0.0}, std::move(altered));
        auto warped = warp_forward(us_src, def);
        const auto [mn, mx] = std::minmax_element(warped.begin(), warped.end());
        const float lo = *mn, range = std::max(*mx - *mn, 1e-12f);
        Rng speckle(speckle_seed);
        const double rayleigh_mean = kSpeckleScale * std::sqrt(M_PI / 2.0);
        for (auto& v : warped) {
            const double u = (v - lo) / range;
            const double factor = 1.0 + speckle.rayleigh(kSpeckleScale) - rayleigh_mean;
            v = static_cast<float>(std::pow(u, gamma) * factor + 1e-3);
        }
        Volume3D us = normalize_intensity(gaussian_blur(Volume3D(spec.dims, spacing, {0.0, 0.0, 0.0}, std::move(warped)), blur_sigma));
        for (int z = 0; z < spec.dims[2]; ++z) {
            for (int y = 0; y < spec.dims[1]; ++y) {
                for (int x = 0; x < spec.dims[0]; ++x) {
                    if (!fan.inside({x * s, y * s, z * s})) us.at(x, y, z) = 0.0f;
                }
            }
        }

        SynthSubject out;
        out.deformation = def;
        out.fan = fan;
        for (std::size_t k = 0; k < landmarks.size(); ++k) {
            char id[16];
            std::snprintf(id, sizeof id, "L%02zu", k + 1);
            out.pairs.mri.add(id, landmarks[k]);
            out.pairs.us.add(id, landmarks[k] + evaluate_deformation(def, landmarks[k]));
        }
        out.mri = std::move(mri);
        out.us = std::move(us);
        return out;
    }
    throw Error(ErrorCode::PlacementFailed, "could not place " + std::to_string(spec.n_landmarks) + " landmarks " +
                                                "at least 8 mm apart inside the fan after " +
                                                std::to_string(kPlacementAttempts) + " attempts");
}

std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, int n_subjects, const SynthSpec& spec) {
    if (n_subjects < 1) throw Error(ErrorCode::InvalidArgument, "need at least one subject");
    std::filesystem::create_directories(dir);
    std::vector<SubjectEntry> entries;
    for (int i = 0; i < n_subjects; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "synth_%03d", i);
        SynthSpec sub = spec;
        sub.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(i));
        auto subject = generate_subject(sub);
        subject.pairs.subject_id = id;
        const std::filesystem::path rel(id);
        std::filesystem::create_directories(dir / rel);
        save_raw_volume(subject.mri, dir / rel / "mri.vol");
        save_raw_volume(subject.us, dir / rel / "us.vol");
        save_landmarks_csv(subject.pairs.mri, dir / rel / "mri_landmarks.csv");
        save_landmarks_csv(subject.pairs.us, dir / rel / "us_landmarks.csv");
        entries.push_back({id, rel / "mri.vol", rel / "us.vol", rel / "mri_landmarks.csv", rel / "us_landmarks.csv"});
        log::info(std::string("wrote ") + id);
    }
    const auto manifest = dir / "pairs.csv";
    save_pair_manifest(entries, manifest);
    return manifest;
}

}  // namespace lmk
