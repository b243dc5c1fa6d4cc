#pragma once

// Diffeomorphism engine: exponentiate stationary velocity fields by
// scaling-and-squaring, compose and apply the resulting deformations, and
// quantify topology through Jacobian determinants.
//
// Deformations are stored as displacements u, so the map is
// phi(x) = x + u(x) and the identity is the zero field.

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "core.hpp"
#include "parallel.hpp"

namespace morphoflow::diffeo {

struct DeformationField {
    VectorField displacement;
    int squaring_steps = 0; // provenance: K used to produce it

    DeformationField() = default;
    explicit DeformationField(VectorField u, int steps = 0)
        : displacement(std::move(u)), squaring_steps(steps) {}

    static DeformationField identity(Shape3 shape, Boundary b) {
        return DeformationField(VectorField(shape, b, 0.0), 0);
    }

    const Shape3& shape() const { return displacement.shape; }
};

struct DetJacStats {
    double mean = 0.0;
    double stddev = 0.0;
    double negative_fraction = 0.0;
    bool per_frame = true;
};

// One squaring step: u'(x) = u(x) + u(x + u(x)).
inline VectorField self_compose(const VectorField& u) {
    VectorField out(u.shape, u.boundary);
    const std::size_t n = u.voxels();
    parallel_for(std::size_t(u.shape.h), [&](std::size_t hh) {
        const int h = int(hh);
        for (int w = 0; w < u.shape.w; ++w) {
            for (int l = 0; l < u.shape.l; ++l) {
                const std::size_t idx = u.index(h, w, l);
                const double ux = u.data[idx];
                const double uy = u.data[n + idx];
                const double uz = u.data[2 * n + idx];
                const auto s = trilinear_sample(u, h + ux, w + uy, l + uz);
                out.data[idx] = ux + s[0];
                out.data[n + idx] = uy + s[1];
                out.data[2 * n + idx] = uz + s[2];
            }
        }
    });
    return out;
}

inline int auto_raise_squaring_steps(double max_norm, int requested) {
    int k = std::max(requested, 0);
    while (k < 60 && max_norm / double(std::uint64_t(1) << k) > 0.5) ++k;
    return k;
}

// phi = exp(v) via scaling-and-squaring: u0 = v / 2^K, then K self
// compositions. K is raised until the scaled step is at most half a voxel.
inline DeformationField integrate_svf(const VectorField& v, int squaring_steps = 7) {
    if (squaring_steps < 0)
        throw std::invalid_argument("integrate_svf: squaring step count must be >= 0");
    for (double x : v.data)
        if (!std::isfinite(x))
            throw std::invalid_argument("integrate_svf: velocity field has non-finite values");
    const int k = auto_raise_squaring_steps(v.max_norm(), squaring_steps);
    VectorField u = v;
    const double scale = 1.0 / double(std::uint64_t(1) << k);
    for (double& x : u.data) x *= scale;
    for (int i = 0; i < k; ++i) u = self_compose(u);
    return DeformationField(std::move(u), k);
}

// (outer o inner)(x) = outer(inner(x)):
// u(x) = u_inner(x) + u_outer(x + u_inner(x)).
inline DeformationField compose(const DeformationField& outer, const DeformationField& inner) {
    if (!(outer.shape() == inner.shape()))
        throw std::invalid_argument("compose: deformation shapes differ: " +
                                    outer.shape().str() + " vs " + inner.shape().str());
    const VectorField& uo = outer.displacement;
    const VectorField& ui = inner.displacement;
    VectorField out(ui.shape, ui.boundary);
    const std::size_t n = ui.voxels();
    parallel_for(std::size_t(ui.shape.h), [&](std::size_t hh) {
        const int h = int(hh);
        for (int w = 0; w < ui.shape.w; ++w) {
            for (int l = 0; l < ui.shape.l; ++l) {
                const std::size_t idx = ui.index(h, w, l);
                const double ix = ui.data[idx];
                const double iy = ui.data[n + idx];
                const double iz = ui.data[2 * n + idx];
                const auto s = trilinear_sample(uo, h + ix, w + iy, l + iz);
                out.data[idx] = ix + s[0];
                out.data[n + idx] = iy + s[1];
                out.data[2 * n + idx] = iz + s[2];
            }
        }
    });
    return DeformationField(std::move(out), std::max(outer.squaring_steps, inner.squaring_steps));
}

enum class WarpMode { linear, nearest };

// Pull-style warp: output(x) = image(x + u(x)). Linear interpolation for
// intensities, nearest for label maps (keeps the label set intact).
inline ScalarVolume warp(const ScalarVolume& image, const DeformationField& phi,
                         WarpMode mode = WarpMode::linear) {
    if (!(image.shape == phi.shape()))
        throw std::invalid_argument("warp: image and deformation shapes differ: " +
                                    image.shape.str() + " vs " + phi.shape().str());
    const VectorField& u = phi.displacement;
    ScalarVolume out(image.shape, image.boundary);
    const std::size_t n = image.shape.voxels();
    parallel_for(std::size_t(image.shape.h), [&](std::size_t hh) {
        const int h = int(hh);
        for (int w = 0; w < image.shape.w; ++w) {
            for (int l = 0; l < image.shape.l; ++l) {
                const std::size_t idx = image.index(h, w, l);
                const double x = h + u.data[idx];
                const double y = w + u.data[n + idx];
                const double z = l + u.data[2 * n + idx];
                if (mode == WarpMode::linear) {
                    out.data[idx] = trilinear_sample(image, x, y, z);
                } else {
                    const auto cw = detail::locate(image.shape, image.boundary, x, y, z);
                    const int hh2 = cw.f[0] < 0.5 ? cw.i0[0] : cw.i1[0];
                    const int ww2 = cw.f[1] < 0.5 ? cw.i0[1] : cw.i1[1];
                    const int ll2 = cw.f[2] < 0.5 ? cw.i0[2] : cw.i1[2];
                    out.data[idx] = image.at(hh2, ww2, ll2);
                }
            }
        }
    });
    return out;
}

// det(I + du/dx) with the same central/one-sided stencils as
// spatial_gradient. 1 = volume preserving, <0 = folding.
inline ScalarVolume jacobian_determinant(const DeformationField& phi) {
    const VectorField& u = phi.displacement;
    const Shape3 s = u.shape;
    if (s.h < 3 || s.w < 3 || s.l < 3)
        throw std::invalid_argument("jacobian_determinant needs extent >= 3 per axis");
    ScalarVolume out(s, u.boundary);
    const bool wrap = u.boundary == Boundary::wrap;
    parallel_for(std::size_t(s.h), [&](std::size_t hh) {
        const int h = int(hh);
        for (int w = 0; w < s.w; ++w) {
            for (int l = 0; l < s.l; ++l) {
                double jac[3][3];
                for (int c = 0; c < 3; ++c) {
                    auto diff1d = [&](int axis, int i, int n) -> double {
                        auto value = [&](int j) {
                            switch (axis) {
                                case 0: return u.fetch(c, j, w, l);
                                case 1: return u.fetch(c, h, j, l);
                                default: return u.fetch(c, h, w, j);
                            }
                        };
                        if (wrap || (i > 0 && i < n - 1))
                            return 0.5 * (value(i + 1) - value(i - 1));
                        if (i == 0) return value(1) - value(0);
                        return value(n - 1) - value(n - 2);
                    };
                    jac[c][0] = diff1d(0, h, s.h);
                    jac[c][1] = diff1d(1, w, s.w);
                    jac[c][2] = diff1d(2, l, s.l);
                    jac[c][c] += 1.0;
                }
                out.at(h, w, l) =
                    jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1]) -
                    jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0]) +
                    jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
            }
        }
    });
    return out;
}

// Mean/std over interior voxels; boundary voxels are excluded because
// one-sided stencils there inflate the spread.
inline DetJacStats detjac_stats(const ScalarVolume& dj) {
    for (double v : dj.data)
        if (!std::isfinite(v))
            throw std::invalid_argument("detjac_stats: non-finite determinant values");
    const Shape3 s = dj.shape;
    double sum = 0.0, sum2 = 0.0;
    std::size_t count = 0, negative = 0;
    const int h0 = s.h > 2 ? 1 : 0, h1 = s.h > 2 ? s.h - 1 : s.h;
    const int w0 = s.w > 2 ? 1 : 0, w1 = s.w > 2 ? s.w - 1 : s.w;
    const int l0 = s.l > 2 ? 1 : 0, l1 = s.l > 2 ? s.l - 1 : s.l;
    for (int h = h0; h < h1; ++h)
        for (int w = w0; w < w1; ++w)
            for (int l = l0; l < l1; ++l) {
                const double v = dj.at(h, w, l);
                sum += v;
                sum2 += v * v;
                if (v < 0.0) ++negative;
                ++count;
            }
    DetJacStats st;
    st.mean = sum / double(count);
    const double var = std::max(0.0, sum2 / double(count) - st.mean * st.mean);
    st.stddev = std::sqrt(var);
    st.negative_fraction = double(negative) / double(count);
    return st;
}

} // namespace morphoflow::diffeo
