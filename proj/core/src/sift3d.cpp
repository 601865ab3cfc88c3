#include "lmk/sift3d.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <fstream>
#include <limits>

#include "lmk/contrastive.hpp"
#include "lmk/parallel.hpp"

namespace lmk {

std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 0.0)) throw Error(ErrorCode::InvalidArgument, "gaussian_kernel: sigma must be positive");
    const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = w;
        sum += w;
    }
    for (auto& w : k) w /= sum;
    return k;
}

namespace {

int reflect(int m, int n) {
    const int period = 2 * n;
    m %= period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}

void blur_axis(std::vector<float>& data, const Index3& dims, int axis, double sigma) {
    if (!(sigma > 0.0)) return;
    const auto kernel = gaussian_kernel(sigma);
    const int radius = static_cast<int>(kernel.size() / 2);
    const std::size_t stride[3] = {1, static_cast<std::size_t>(dims[0]),
                                   static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1])};
    const int n = dims[axis];
    const int a1 = axis == 0 ? 1 : 0;
    const int a2 = axis == 2 ? 1 : 2;
    parallel_for(static_cast<std::size_t>(dims[a2]), [&](std::size_t j2) {
        std::vector<double> line(static_cast<std::size_t>(n + 2 * radius));
        for (int j1 = 0; j1 < dims[a1]; ++j1) {
            const std::size_t base = static_cast<std::size_t>(j1) * stride[a1] + j2 * stride[a2];
            for (int i = -radius; i < n + radius; ++i) {
                line[static_cast<std::size_t>(i + radius)] = data[base + static_cast<std::size_t>(reflect(i, n)) * stride[axis]];
            }
            for (int i = 0; i < n; ++i) {
                double acc = 0.0;
                const double* src = line.data() + i;
                for (std::size_t k = 0; k < kernel.size(); ++k) acc += kernel[k] * src[k];
                data[base + static_cast<std::size_t>(i) * stride[axis]] = static_cast<float>(acc);
            }
        }
    });
}

Volume3D downsample2(const Volume3D& v) {
    const Index3 d = v.dims();
    const Index3 nd{(d[0] + 1) / 2, (d[1] + 1) / 2, (d[2] + 1) / 2};
    Volume3D out(nd, 2.0 * v.spacing(), v.origin());
    for (int z = 0; z < nd[2]; ++z) {
        for (int y = 0; y < nd[1]; ++y) {
            for (int x = 0; x < nd[0]; ++x) out.at(x, y, z) = v.at(2 * x, 2 * y, 2 * z);
        }
    }
    return out;
}

Volume3D subtract(const Volume3D& a, const Volume3D& b) {
    std::vector<float> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] - b.data()[i];
    return Volume3D(a.dims(), a.spacing(), a.origin(), std::move(d));
}

}  // namespace

Volume3D gaussian_blur(const Volume3D& v, const Vec3& sigma) {
    auto data = v.data();
    for (int a = 0; a < 3; ++a) blur_axis(data, v.dims(), a, sigma[static_cast<std::size_t>(a)]);
    return Volume3D(v.dims(), v.spacing(), v.origin(), std::move(data));
}

Volume3D gaussian_blur(const Volume3D& v, double sigma) { return gaussian_blur(v, Vec3{sigma, sigma, sigma}); }

ScaleSpace build_scale_space(const Volume3D& v, int octaves, int levels, double sigma0) {
    if (octaves < 1 || levels < 1 || !(sigma0 > 0.0)) {
        throw Error(ErrorCode::InvalidArgument, "build_scale_space: bad parameters");
    }
    for (int d : v.dims()) {
        int coarse = d;
        for (int o = 1; o < octaves; ++o) coarse = (coarse + 1) / 2;
        if (coarse < 16) {
            throw Error(ErrorCode::VolumeTooSmall, "volume too small for " + std::to_string(octaves) +
                                                       " octaves (coarsest side " + std::to_string(coarse) + " < 16)");
        }
    }

    ScaleSpace ss;
    ss.levels_per_octave = levels;
    ss.sigma0 = sigma0;
    for (int o = 0; o < octaves; ++o) {
        Octave oct;
        Volume3D first = o == 0 ? gaussian_blur(v, sigma0) : downsample2(ss.octaves.back().gauss[static_cast<std::size_t>(levels)]);
        oct.gauss.push_back(first);
        oct.sigmas.push_back(sigma0 * std::pow(2.0, o));
        for (int s = 1; s < levels + 3; ++s) {
            const double rel = sigma0 * std::pow(2.0, static_cast<double>(s) / levels);
            oct.gauss.push_back(gaussian_blur(first, std::sqrt(rel * rel - sigma0 * sigma0)));
            oct.sigmas.push_back(sigma0 * std::pow(2.0, o + static_cast<double>(s) / levels));
        }
        for (int s = 0; s < levels + 2; ++s) {
            oct.dog.push_back(subtract(oct.gauss[static_cast<std::size_t>(s + 1)], oct.gauss[static_cast<std::size_t>(s)]));
        }
        ss.octaves.push_back(std::move(oct));
    }
    return ss;
}

namespace {

bool is_extremum(const std::vector<Volume3D>& dog, int s, int x, int y, int z) {
    const float c = dog[static_cast<std::size_t>(s)].at(x, y, z);
    bool is_max = true, is_min = true;
    for (int ds = -1; ds <= 1; ++ds) {
        const Volume3D& lvl = dog[static_cast<std::size_t>(s + ds)];
        for (int dz = -1; dz <= 1; ++dz) {
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (ds == 0 && dx == 0 && dy == 0 && dz == 0) continue;
                    const float n = lvl.at(x + dx, y + dy, z + dz);
                    if (n >= c) is_max = false;
                    if (n <= c) is_min = false;
                    if (!is_max && !is_min) return false;
                }
            }
        }
    }
    return true;
}

// D at integer (x, y, z) of level s; coordinates ordered (x, y, z, s).
double dval(const std::vector<Volume3D>& dog, const std::array<int, 4>& p) {
    return dog[static_cast<std::size_t>(p[3])].at(p[0], p[1], p[2]);
}

struct Refined {
    std::array<int, 4> pos;
    Eigen::Vector4d offset;
    double value;
};

std::optional<Refined> refine(const std::vector<Volume3D>& dog, std::array<int, 4> p, int levels) {
    const Index3 dims = dog.front().dims();
    for (int iter = 0; iter < 5; ++iter) {
        Eigen::Vector4d g;
        Eigen::Matrix4d h;
        const double c = dval(dog, p);
        for (int i = 0; i < 4; ++i) {
            auto pp = p, pm = p;
            ++pp[static_cast<std::size_t>(i)];
            --pm[static_cast<std::size_t>(i)];
            const double vp = dval(dog, pp), vm = dval(dog, pm);
            g[i] = 0.5 * (vp - vm);
            h(i, i) = vp + vm - 2.0 * c;
            for (int j = i + 1; j < 4; ++j) {
                auto a = p, b = p, cc = p, d = p;
                ++a[static_cast<std::size_t>(i)], ++a[static_cast<std::size_t>(j)];
                ++b[static_cast<std::size_t>(i)], --b[static_cast<std::size_t>(j)];
                --cc[static_cast<std::size_t>(i)], ++cc[static_cast<std::size_t>(j)];
                --d[static_cast<std::size_t>(i)], --d[static_cast<std::size_t>(j)];
                h(i, j) = h(j, i) = 0.25 * (dval(dog, a) - dval(dog, b) - dval(dog, cc) + dval(dog, d));
            }
        }
        Eigen::FullPivLU<Eigen::Matrix4d> lu(h);
        if (!lu.isInvertible()) return std::nullopt;
        const Eigen::Vector4d off = -lu.solve(g);
        if (!off.allFinite()) return std::nullopt;
        if ((off.array().abs() < 0.5).all()) return Refined{p, off, c + 0.5 * g.dot(off)};
        for (int i = 0; i < 4; ++i) p[static_cast<std::size_t>(i)] += static_cast<int>(std::lround(off[i]));
        if (p[3] < 1 || p[3] > levels) return std::nullopt;
        for (int i = 0; i < 3; ++i) {
            if (p[static_cast<std::size_t>(i)] < 1 || p[static_cast<std::size_t>(i)] > dims[static_cast<std::size_t>(i)] - 2) {
                return std::nullopt;
            }
        }
    }
    return std::nullopt;
}

bool edge_like(const Volume3D& d, int x, int y, int z, double edge_ratio) {
    auto at = [&](int dx, int dy, int dz) { return static_cast<double>(d.at(x + dx, y + dy, z + dz)); };
    const double c = at(0, 0, 0);
    Eigen::Matrix3d h;
    h(0, 0) = at(1, 0, 0) + at(-1, 0, 0) - 2 * c;
    h(1, 1) = at(0, 1, 0) + at(0, -1, 0) - 2 * c;
    h(2, 2) = at(0, 0, 1) + at(0, 0, -1) - 2 * c;
    h(0, 1) = h(1, 0) = 0.25 * (at(1, 1, 0) - at(1, -1, 0) - at(-1, 1, 0) + at(-1, -1, 0));
    h(0, 2) = h(2, 0) = 0.25 * (at(1, 0, 1) - at(1, 0, -1) - at(-1, 0, 1) + at(-1, 0, -1));
    h(1, 2) = h(2, 1) = 0.25 * (at(0, 1, 1) - at(0, 1, -1) - at(0, -1, 1) + at(0, -1, -1));
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(h, Eigen::EigenvaluesOnly);
    const Eigen::Vector3d ev = es.eigenvalues();
    const bool all_pos = (ev.array() > 0.0).all(), all_neg = (ev.array() < 0.0).all();
    if (!all_pos && !all_neg) return true;
    const double lo = ev.cwiseAbs().minCoeff(), hi = ev.cwiseAbs().maxCoeff();
    return hi > edge_ratio * lo;
}

}  // namespace

std::vector<Keypoint3D> detect_keypoints(const ScaleSpace& ss, const SiftDetectConfig& cfg) {
    std::vector<Keypoint3D> out;
    const int levels = ss.levels_per_octave;
    const double prefilter = 0.5 * cfg.contrast_thresh;
    for (std::size_t o = 0; o < ss.octaves.size(); ++o) {
        const auto& dog = ss.octaves[o].dog;
        const Index3 d = dog.front().dims();
        // One slot per z-slice keeps the output order fixed.
        std::vector<std::vector<Keypoint3D>> per_slice(static_cast<std::size_t>(d[2]));
        parallel_for(per_slice.size(), [&](std::size_t zi) {
            const int z = static_cast<int>(zi);
            if (z < 1 || z > d[2] - 2) return;
            for (int s = 1; s <= levels; ++s) {
                const Volume3D& lvl = dog[static_cast<std::size_t>(s)];
                for (int y = 1; y < d[1] - 1; ++y) {
                    for (int x = 1; x < d[0] - 1; ++x) {
                        if (std::abs(lvl.at(x, y, z)) < prefilter) continue;
                        if (!is_extremum(dog, s, x, y, z)) continue;
                        const auto r = refine(dog, {x, y, z, s}, levels);
                        if (!r || std::abs(r->value) < cfg.contrast_thresh) continue;
                        const auto& p = r->pos;
                        if (edge_like(dog[static_cast<std::size_t>(p[3])], p[0], p[1], p[2], cfg.edge_ratio)) continue;
                        Keypoint3D kp;
                        const Vec3 oct_voxel{p[0] + r->offset[0], p[1] + r->offset[1], p[2] + r->offset[2]};
                        kp.world = lvl.voxel_to_world(oct_voxel);
                        const double scale = std::pow(2.0, static_cast<double>(o));
                        kp.voxel = {oct_voxel[0] * scale, oct_voxel[1] * scale, oct_voxel[2] * scale};
                        kp.octave = static_cast<int>(o);
                        kp.level = p[3] + r->offset[3];
                        kp.sigma = ss.sigma0 * std::pow(2.0, static_cast<double>(o) + kp.level / levels);
                        kp.dog = r->value;
                        per_slice[zi].push_back(kp);
                    }
                }
            }
        });
        for (auto& v : per_slice) out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

namespace {

const std::array<Vec3, kSiftDirections>& icosahedron_directions() {
    static const std::array<Vec3, kSiftDirections> dirs = [] {
        const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
        std::array<Vec3, kSiftDirections> d{};
        int k = 0;
        for (int a : {-1, 1}) {
            for (int b : {-1, 1}) {
                d[static_cast<std::size_t>(k++)] = {0.0, static_cast<double>(a), b * phi};
                d[static_cast<std::size_t>(k++)] = {static_cast<double>(a), b * phi, 0.0};
                d[static_cast<std::size_t>(k++)] = {a * phi, 0.0, static_cast<double>(b)};
            }
        }
        for (auto& v : d) v = (1.0 / norm(v)) * v;
        return d;
    }();
    return dirs;
}

}  // namespace

std::vector<double> compute_descriptor(const Volume3D& v, const Vec3& world, double sigma) {
    if (!(sigma > 0.0)) throw Error(ErrorCode::InvalidArgument, "compute_descriptor: sigma must be positive");
    const Vec3 c = v.world_to_voxel(world);
    const double half = 8.0 * sigma / 1.6;
    const double bin_width = 2.0 * half / kSiftSubregions;
    const Index3 d = v.dims();

    int lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
        lo[a] = std::max(1, static_cast<int>(std::ceil(c[static_cast<std::size_t>(a)] - half)));
        hi[a] = std::min(d[static_cast<std::size_t>(a)] - 2, static_cast<int>(std::floor(c[static_cast<std::size_t>(a)] + half)));
        if (lo[a] > hi[a]) throw Error(ErrorCode::NoDescriptor, "descriptor window lies outside the volume");
    }

    const auto& dirs = icosahedron_directions();
    std::vector<double> desc(kSiftDescriptorSize, 0.0);
    const double inv_two_var = 1.0 / (2.0 * half * half);
    for (int z = lo[2]; z <= hi[2]; ++z) {
        for (int y = lo[1]; y <= hi[1]; ++y) {
            for (int x = lo[0]; x <= hi[0]; ++x) {
                const Vec3 g{0.5 * (static_cast<double>(v.at(x + 1, y, z)) - v.at(x - 1, y, z)),
                             0.5 * (static_cast<double>(v.at(x, y + 1, z)) - v.at(x, y - 1, z)),
                             0.5 * (static_cast<double>(v.at(x, y, z + 1)) - v.at(x, y, z - 1))};
                if (g[0] == 0.0 && g[1] == 0.0 && g[2] == 0.0) continue;
                const Vec3 rel{x - c[0], y - c[1], z - c[2]};
                const double weight = std::exp(-dot(rel, rel) * inv_two_var);
                double u[3];
                for (int a = 0; a < 3; ++a) u[a] = rel[static_cast<std::size_t>(a)] / bin_width + 0.5 * kSiftSubregions - 0.5;
                double dir_w[kSiftDirections];
                for (int k = 0; k < kSiftDirections; ++k) dir_w[k] = std::max(0.0, dot(g, dirs[static_cast<std::size_t>(k)]));

                const int b0[3] = {static_cast<int>(std::floor(u[0])), static_cast<int>(std::floor(u[1])),
                                   static_cast<int>(std::floor(u[2]))};
                for (int i = 0; i < 2; ++i) {
                    const int bx = b0[0] + i;
                    if (bx < 0 || bx >= kSiftSubregions) continue;
                    const double wx = i ? u[0] - b0[0] : 1.0 - (u[0] - b0[0]);
                    for (int j = 0; j < 2; ++j) {
                        const int by = b0[1] + j;
                        if (by < 0 || by >= kSiftSubregions) continue;
                        const double wy = j ? u[1] - b0[1] : 1.0 - (u[1] - b0[1]);
                        for (int k = 0; k < 2; ++k) {
                            const int bz = b0[2] + k;
                            if (bz < 0 || bz >= kSiftSubregions) continue;
                            const double wz = k ? u[2] - b0[2] : 1.0 - (u[2] - b0[2]);
                            const double w = weight * wx * wy * wz;
                            double* bin = desc.data() + ((bz * kSiftSubregions + by) * kSiftSubregions + bx) * kSiftDirections;
                            for (int t = 0; t < kSiftDirections; ++t) bin[t] += w * dir_w[t];
                        }
                    }
                }
            }
        }
    }

    auto normalize = [&] {
        double n = 0.0;
        for (double x : desc) n += x * x;
        n = std::sqrt(n);
        if (!(n > 0.0)) throw Error(ErrorCode::NoDescriptor, "descriptor window has no gradient");
        for (double& x : desc) x /= n;
    };
    normalize();
    for (double& x : desc) x = std::min(x, kSiftClamp);
    normalize();
    return desc;
}

SiftIndex build_sift_index(const Volume3D& us, const SiftDetectConfig& cfg) {
    const auto ss = build_scale_space(us);
    const auto kps = detect_keypoints(ss, cfg);
    std::vector<std::vector<double>> descs(kps.size());
    parallel_for(kps.size(), [&](std::size_t i) {
        try {
            descs[i] = compute_descriptor(us, kps[i].world, kReferenceSigma);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NoDescriptor) throw;
        }
    });
    SiftIndex index;
    for (std::size_t i = 0; i < kps.size(); ++i) {
        if (descs[i].empty()) continue;
        index.keypoints.push_back(kps[i]);
        index.descriptors.push_back(std::move(descs[i]));
    }
    return index;
}

MatchResult sift_match_landmark(const Volume3D& mri, const SiftIndex& us_index, const Landmark& mri_landmark) {
    if (us_index.keypoints.empty()) throw Error(ErrorCode::NoKeypoints, "no SIFT keypoints detected in the US volume");
    const auto ref = compute_descriptor(mri, mri_landmark.position, kReferenceSigma);
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < us_index.descriptors.size(); ++i) {
        const double s = cosine_similarity(ref, us_index.descriptors[i]);
        if (s > best_score) {
            best_score = s;
            best = i;
        }
    }
    MatchResult r;
    r.landmark_id = mri_landmark.id;
    r.predicted_us_world = us_index.keypoints[best].world;
    r.score_total = best_score;
    r.score_per_axis = {best_score, 0.0, 0.0};
    r.candidates_evaluated = static_cast<long>(us_index.descriptors.size());
    return r;
}

MatchResult sift_match_landmark(const Volume3D& mri, const Volume3D& us, const Landmark& mri_landmark) {
    return sift_match_landmark(mri, build_sift_index(us), mri_landmark);
}

void save_keypoints_csv(std::span<const Keypoint3D> keypoints, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + path.string());
    out << "x_mm,y_mm,z_mm,sigma,dog\n";
    char buf[200];
    for (const auto& k : keypoints) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g\n", k.world[0], k.world[1], k.world[2], k.sigma, k.dog);
        out << buf;
    }
}

}  // namespace lmk
