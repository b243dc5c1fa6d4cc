#pragma once

// Grid primitives shared across the library: dense 3D scalar volumes,
// per-voxel 3-vector fields, trilinear sampling, finite-difference
// gradients, grid resampling, and raw float32 file I/O.
//
// Conventions:
//   - Voxel coordinates are in voxel units with the origin at voxel (0,0,0).
//   - Linear index of voxel (h,w,l) in a (H,W,L) grid is (h*W + w)*L + l.
//   - Vector fields store three component planes consecutively
//     (component-major), each plane in the scalar voxel order above.
//   - Out-of-range access follows the container's boundary mode:
//     `wrap` treats the grid as a torus, `clamp` repeats edge values.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace morphoflow {

enum class Boundary { wrap, clamp };

inline const char* boundary_name(Boundary b) {
    return b == Boundary::wrap ? "wrap" : "clamp";
}

inline Boundary boundary_from_name(const std::string& s) {
    if (s == "wrap") return Boundary::wrap;
    if (s == "clamp") return Boundary::clamp;
    throw std::invalid_argument("unknown boundary mode: " + s);
}

struct Shape3 {
    int h = 0, w = 0, l = 0;

    bool operator==(const Shape3&) const = default;
    std::size_t voxels() const { return std::size_t(h) * w * l; }
    std::string str() const {
        return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(l);
    }
};

namespace detail {

inline void check_shape_positive(const Shape3& s) {
    if (s.h <= 0 || s.w <= 0 || s.l <= 0)
        throw std::invalid_argument("volume shape must be positive, got " + s.str());
}

inline void check_finite(const std::vector<double>& data, const char* what) {
    for (double v : data)
        if (!std::isfinite(v))
            throw std::invalid_argument(std::string(what) + " contains non-finite values");
}

// Index wrap/clamp for a single axis of extent n.
inline int wrap_index(int i, int n) {
    int r = i % n;
    return r < 0 ? r + n : r;
}

inline int clamp_index(int i, int n) {
    return i < 0 ? 0 : (i >= n ? n - 1 : i);
}

inline int bounded_index(int i, int n, Boundary b) {
    return b == Boundary::wrap ? wrap_index(i, n) : clamp_index(i, n);
}

} // namespace detail

// Dense 3D grid of real intensities. Immutable by convention after
// construction; all mutating access happens before sharing.
struct ScalarVolume {
    Shape3 shape;
    Boundary boundary = Boundary::clamp;
    std::vector<double> data;

    ScalarVolume() = default;
    ScalarVolume(Shape3 s, Boundary b, double fill = 0.0)
        : shape(s), boundary(b) {
        detail::check_shape_positive(s);
        data.assign(s.voxels(), fill);
    }
    ScalarVolume(Shape3 s, Boundary b, std::vector<double> values)
        : shape(s), boundary(b), data(std::move(values)) {
        detail::check_shape_positive(s);
        if (data.size() != s.voxels())
            throw std::invalid_argument("scalar volume data length does not match shape " + s.str());
        detail::check_finite(data, "scalar volume");
    }

    std::size_t index(int h, int w, int l) const {
        return (std::size_t(h) * shape.w + w) * shape.l + l;
    }
    double& at(int h, int w, int l) { return data[index(h, w, l)]; }
    double at(int h, int w, int l) const { return data[index(h, w, l)]; }

    // Fetch with boundary handling on each axis.
    double fetch(int h, int w, int l) const {
        h = detail::bounded_index(h, shape.h, boundary);
        w = detail::bounded_index(w, shape.w, boundary);
        l = detail::bounded_index(l, shape.l, boundary);
        return data[index(h, w, l)];
    }
};

// Per-voxel 3-vectors (velocity or displacement, voxel units).
// Three component planes stored consecutively.
struct VectorField {
    Shape3 shape;
    Boundary boundary = Boundary::clamp;
    std::vector<double> data; // size 3 * voxels, plane-major

    static constexpr int channels = 3;

    VectorField() = default;
    VectorField(Shape3 s, Boundary b, double fill = 0.0)
        : shape(s), boundary(b) {
        detail::check_shape_positive(s);
        data.assign(3 * s.voxels(), fill);
    }
    VectorField(Shape3 s, Boundary b, std::vector<double> values)
        : shape(s), boundary(b), data(std::move(values)) {
        detail::check_shape_positive(s);
        if (data.size() != 3 * s.voxels())
            throw std::invalid_argument("vector field data length does not match 3 planes of " + s.str());
        detail::check_finite(data, "vector field");
    }

    std::size_t voxels() const { return shape.voxels(); }
    std::size_t index(int h, int w, int l) const {
        return (std::size_t(h) * shape.w + w) * shape.l + l;
    }
    double& at(int c, int h, int w, int l) { return data[std::size_t(c) * voxels() + index(h, w, l)]; }
    double at(int c, int h, int w, int l) const { return data[std::size_t(c) * voxels() + index(h, w, l)]; }
    double& plane(int c, std::size_t idx) { return data[std::size_t(c) * voxels() + idx]; }
    double plane(int c, std::size_t idx) const { return data[std::size_t(c) * voxels() + idx]; }

    double fetch(int c, int h, int w, int l) const {
        h = detail::bounded_index(h, shape.h, boundary);
        w = detail::bounded_index(w, shape.w, boundary);
        l = detail::bounded_index(l, shape.l, boundary);
        return data[std::size_t(c) * voxels() + index(h, w, l)];
    }

    double max_norm() const {
        std::size_t n = voxels();
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double a = data[i], b = data[n + i], c = data[2 * n + i];
            double s = a * a + b * b + c * c;
            if (s > m) m = s;
        }
        return std::sqrt(m);
    }

    double mean_norm() const {
        std::size_t n = voxels();
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double a = data[i], b = data[n + i], c = data[2 * n + i];
            acc += std::sqrt(a * a + b * b + c * c);
        }
        return acc / double(n);
    }
};

// Ordered stack of velocity fields with strictly increasing ages (years).
struct VelocitySequence {
    std::vector<VectorField> frames;
    std::vector<double> ages;

    VelocitySequence() = default;
    VelocitySequence(std::vector<VectorField> f, std::vector<double> a)
        : frames(std::move(f)), ages(std::move(a)) {
        validate();
    }

    void validate() const {
        if (frames.empty() || frames.size() != ages.size())
            throw std::invalid_argument("velocity sequence needs matching, non-empty frames and ages");
        for (std::size_t i = 1; i < ages.size(); ++i)
            if (!(ages[i] > ages[i - 1]))
                throw std::invalid_argument("velocity sequence ages must be strictly increasing");
        for (std::size_t i = 1; i < frames.size(); ++i)
            if (!(frames[i].shape == frames[0].shape))
                throw std::invalid_argument("velocity sequence frames must share one shape");
    }

    int frame_count() const { return int(frames.size()); }
};

namespace detail {

struct CellWeights {
    int i0[3], i1[3];   // corner indices (already boundary-mapped)
    double f[3];        // fractional position inside the cell
    double dsat[3];     // d(mapped coord)/d(raw coord): 0 where clamp saturates
};

// Locate the interpolation cell for continuous coordinate (x,y,z).
// Wrap maps coordinates onto the torus; clamp pins them to [0, n-1].
inline CellWeights locate(const Shape3& shape, Boundary b, double x, double y, double z) {
    if (!(std::isfinite(x) && std::isfinite(y) && std::isfinite(z)))
        throw std::invalid_argument("non-finite sample coordinate");
    const int n[3] = {shape.h, shape.w, shape.l};
    double c[3] = {x, y, z};
    CellWeights cw;
    for (int a = 0; a < 3; ++a) {
        if (b == Boundary::wrap) {
            double m = std::fmod(c[a], double(n[a]));
            if (m < 0) m += n[a];
            int i0 = int(std::floor(m));
            if (i0 >= n[a]) i0 = n[a] - 1; // fmod rounding guard
            cw.i0[a] = i0;
            cw.i1[a] = (i0 + 1 == n[a]) ? 0 : i0 + 1;
            cw.f[a] = m - i0;
            cw.dsat[a] = 1.0;
        } else {
            const bool saturated = c[a] < 0.0 || c[a] > double(n[a] - 1);
            double m = c[a] < 0.0 ? 0.0 : (c[a] > double(n[a] - 1) ? double(n[a] - 1) : c[a]);
            int i0 = int(std::floor(m));
            if (i0 > n[a] - 1) i0 = n[a] - 1;
            cw.i0[a] = i0;
            cw.i1[a] = i0 + 1 > n[a] - 1 ? n[a] - 1 : i0 + 1;
            cw.f[a] = m - i0;
            cw.dsat[a] = saturated ? 0.0 : 1.0;
        }
    }
    return cw;
}

} // namespace detail

// Trilinear blend of the 8 voxels surrounding (x,y,z).
inline double trilinear_sample(const ScalarVolume& vol, double x, double y, double z) {
    const auto cw = detail::locate(vol.shape, vol.boundary, x, y, z);
    const double fh = cw.f[0], fw = cw.f[1], fl = cw.f[2];
    const double gh = 1.0 - fh, gw = 1.0 - fw, gl = 1.0 - fl;
    const int h0 = cw.i0[0], h1 = cw.i1[0];
    const int w0 = cw.i0[1], w1 = cw.i1[1];
    const int l0 = cw.i0[2], l1 = cw.i1[2];
    return gh * (gw * (gl * vol.at(h0, w0, l0) + fl * vol.at(h0, w0, l1)) +
                 fw * (gl * vol.at(h0, w1, l0) + fl * vol.at(h0, w1, l1))) +
           fh * (gw * (gl * vol.at(h1, w0, l0) + fl * vol.at(h1, w0, l1)) +
                 fw * (gl * vol.at(h1, w1, l0) + fl * vol.at(h1, w1, l1)));
}

inline std::array<double, 3> trilinear_sample(const VectorField& field, double x, double y, double z) {
    const auto cw = detail::locate(field.shape, field.boundary, x, y, z);
    const double fh = cw.f[0], fw = cw.f[1], fl = cw.f[2];
    const double gh = 1.0 - fh, gw = 1.0 - fw, gl = 1.0 - fl;
    const int h0 = cw.i0[0], h1 = cw.i1[0];
    const int w0 = cw.i0[1], w1 = cw.i1[1];
    const int l0 = cw.i0[2], l1 = cw.i1[2];
    std::array<double, 3> out{};
    for (int c = 0; c < 3; ++c) {
        out[c] = gh * (gw * (gl * field.at(c, h0, w0, l0) + fl * field.at(c, h0, w0, l1)) +
                       fw * (gl * field.at(c, h0, w1, l0) + fl * field.at(c, h0, w1, l1))) +
                 fh * (gw * (gl * field.at(c, h1, w0, l0) + fl * field.at(c, h1, w0, l1)) +
                       fw * (gl * field.at(c, h1, w1, l0) + fl * field.at(c, h1, w1, l1)));
    }
    return out;
}

// Central-difference gradient (intensity per voxel). Interior voxels use
// central stencils; clamp boundaries fall back to one-sided differences,
// wrap boundaries stay central across the seam.
inline VectorField spatial_gradient(const ScalarVolume& vol) {
    const Shape3 s = vol.shape;
    if (s.h < 3 || s.w < 3 || s.l < 3)
        throw std::invalid_argument("spatial_gradient needs extent >= 3 per axis, got " + s.str());
    VectorField g(s, vol.boundary);
    const bool wrap = vol.boundary == Boundary::wrap;
    for (int h = 0; h < s.h; ++h) {
        for (int w = 0; w < s.w; ++w) {
            for (int l = 0; l < s.l; ++l) {
                const std::size_t idx = vol.index(h, w, l);
                auto diff1d = [&](int axis, int i, int n) -> double {
                    auto value = [&](int j) {
                        switch (axis) {
                            case 0: return vol.fetch(j, w, l);
                            case 1: return vol.fetch(h, j, l);
                            default: return vol.fetch(h, w, j);
                        }
                    };
                    if (wrap || (i > 0 && i < n - 1))
                        return 0.5 * (value(i + 1) - value(i - 1));
                    if (i == 0) return value(1) - value(0);
                    return value(n - 1) - value(n - 2);
                };
                g.plane(0, idx) = diff1d(0, h, s.h);
                g.plane(1, idx) = diff1d(1, w, s.w);
                g.plane(2, idx) = diff1d(2, l, s.l);
            }
        }
    }
    return g;
}

namespace detail {

// Map output voxel i' on an n_out grid to a source coordinate on an n_in
// grid, aligning the first and last samples of both grids.
inline double resample_coord(int i, int n_out, int n_in) {
    if (n_out <= 1 || n_in <= 1) return 0.0;
    return double(i) * double(n_in - 1) / double(n_out - 1);
}

} // namespace detail

inline ScalarVolume resample(const ScalarVolume& vol, const Shape3& new_shape) {
    detail::check_shape_positive(new_shape);
    if (new_shape == vol.shape) return vol;
    ScalarVolume out(new_shape, vol.boundary);
    for (int h = 0; h < new_shape.h; ++h) {
        const double x = detail::resample_coord(h, new_shape.h, vol.shape.h);
        for (int w = 0; w < new_shape.w; ++w) {
            const double y = detail::resample_coord(w, new_shape.w, vol.shape.w);
            for (int l = 0; l < new_shape.l; ++l) {
                const double z = detail::resample_coord(l, new_shape.l, vol.shape.l);
                out.at(h, w, l) = trilinear_sample(vol, x, y, z);
            }
        }
    }
    return out;
}

// Resampling a displacement/velocity field also rescales each component by
// the per-axis shape ratio so voxel-unit displacements stay consistent.
inline VectorField resample(const VectorField& field, const Shape3& new_shape) {
    detail::check_shape_positive(new_shape);
    if (new_shape == field.shape) return field;
    VectorField out(new_shape, field.boundary);
    const double scale[3] = {
        double(new_shape.h) / double(field.shape.h),
        double(new_shape.w) / double(field.shape.w),
        double(new_shape.l) / double(field.shape.l),
    };
    for (int h = 0; h < new_shape.h; ++h) {
        const double x = detail::resample_coord(h, new_shape.h, field.shape.h);
        for (int w = 0; w < new_shape.w; ++w) {
            const double y = detail::resample_coord(w, new_shape.w, field.shape.w);
            for (int l = 0; l < new_shape.l; ++l) {
                const double z = detail::resample_coord(l, new_shape.l, field.shape.l);
                const auto v = trilinear_sample(field, x, y, z);
                const std::size_t idx = out.index(h, w, l);
                out.plane(0, idx) = v[0] * scale[0];
                out.plane(1, idx) = v[1] * scale[1];
                out.plane(2, idx) = v[2] * scale[2];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Raw file format: float32, little-endian, voxel order (h*W + w)*L + l.
// Vector fields store the three component planes consecutively.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_f32(std::ofstream& os, const std::vector<double>& data) {
    std::vector<float> buf(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) buf[i] = float(data[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             std::streamsize(buf.size() * sizeof(float)));
}

inline std::vector<double> read_f32(std::ifstream& is, std::size_t count, const std::string& path) {
    std::vector<float> buf(count);
    is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(count * sizeof(float)));
    if (!is || std::size_t(is.gcount()) != count * sizeof(float))
        throw std::runtime_error("short read from raw volume file: " + path);
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = double(buf[i]);
    return out;
}

} // namespace detail

inline void write_raw(const std::string& path, const ScalarVolume& vol) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    detail::write_f32(os, vol.data);
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline void write_raw(const std::string& path, const VectorField& field) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    detail::write_f32(os, field.data);
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline ScalarVolume read_raw_volume(const std::string& path, Shape3 shape,
                                    Boundary boundary = Boundary::clamp) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    return ScalarVolume(shape, boundary, detail::read_f32(is, shape.voxels(), path));
}

inline VectorField read_raw_field(const std::string& path, Shape3 shape,
                                  Boundary boundary = Boundary::clamp) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    return VectorField(shape, boundary, detail::read_f32(is, 3 * shape.voxels(), path));
}

} // namespace morphoflow
