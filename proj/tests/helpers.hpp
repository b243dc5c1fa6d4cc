#pragma once

// Shared test fixtures: smooth random fields, simple phantoms, field norms.

#include <cmath>
#include <vector>

#include "morphoflow/core.hpp"
#include "morphoflow/diffeo.hpp"
#include "morphoflow/rng.hpp"

namespace testutil {

using namespace morphoflow;

// Separable Gaussian blur of one component plane, boundary-aware.
inline void blur_plane(std::vector<double>& plane, const Shape3& s, Boundary b, double sigma) {
    const int radius = int(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        norm += kernel[i + radius];
    }
    for (double& k : kernel) k /= norm;

    auto index = [&](int h, int w, int l) {
        return (std::size_t(h) * s.w + w) * s.l + l;
    };
    std::vector<double> tmp(plane.size());
    const int dims[3] = {s.h, s.w, s.l};
    for (int axis = 0; axis < 3; ++axis) {
        for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w)
                for (int l = 0; l < s.l; ++l) {
                    double acc = 0.0;
                    for (int o = -radius; o <= radius; ++o) {
                        int c[3] = {h, w, l};
                        c[axis] = detail::bounded_index(c[axis] + o, dims[axis], b);
                        acc += kernel[o + radius] * plane[index(c[0], c[1], c[2])];
                    }
                    tmp[index(h, w, l)] = acc;
                }
        plane.swap(tmp);
    }
}

// Gaussian-smoothed random field scaled to a requested max vector norm.
inline VectorField smooth_random_field(Shape3 shape, Boundary b, double max_norm,
                                       std::uint64_t seed, double sigma = 2.0) {
    Rng rng(seed);
    VectorField v(shape, b, 0.0);
    const std::size_t n = shape.voxels();
    for (double& x : v.data) x = rng.normal();
    for (int c = 0; c < 3; ++c) {
        std::vector<double> plane(v.data.begin() + c * n, v.data.begin() + (c + 1) * n);
        blur_plane(plane, shape, b, sigma);
        std::copy(plane.begin(), plane.end(), v.data.begin() + c * n);
    }
    const double current = v.max_norm();
    if (current > 0.0)
        for (double& x : v.data) x *= max_norm / current;
    return v;
}

// Smooth multi-bump intensity phantom in [0,1].
inline ScalarVolume smooth_phantom(Shape3 shape, Boundary b, std::uint64_t seed) {
    Rng rng(seed);
    ScalarVolume img(shape, b, 0.0);
    struct Bump { double c[3], radius, amp; };
    std::vector<Bump> bumps;
    for (int i = 0; i < 5; ++i) {
        Bump bump;
        for (int a = 0; a < 3; ++a)
            bump.c[a] = rng.uniform(0.25, 0.75) * (a == 0 ? shape.h : a == 1 ? shape.w : shape.l);
        bump.radius = rng.uniform(0.12, 0.25) * shape.h;
        bump.amp = rng.uniform(0.4, 1.0);
        bumps.push_back(bump);
    }
    for (int h = 0; h < shape.h; ++h)
        for (int w = 0; w < shape.w; ++w)
            for (int l = 0; l < shape.l; ++l) {
                double val = 0.0;
                for (const auto& bump : bumps) {
                    const double dx = h - bump.c[0], dy = w - bump.c[1], dz = l - bump.c[2];
                    val += bump.amp * std::exp(-0.5 * (dx * dx + dy * dy + dz * dz) /
                                               (bump.radius * bump.radius));
                }
                img.at(h, w, l) = val;
            }
    return img;
}

// Torus-periodic texture with informative gradients at every voxel; suited
// to wrap-boundary registration problems.
inline ScalarVolume periodic_texture(Shape3 shape, std::uint64_t seed) {
    Rng rng(seed);
    ScalarVolume img(shape, Boundary::wrap, 0.0);
    const double p0 = rng.uniform(0, 6.28), p1 = rng.uniform(0, 6.28), p2 = rng.uniform(0, 6.28);
    for (int h = 0; h < shape.h; ++h)
        for (int w = 0; w < shape.w; ++w)
            for (int l = 0; l < shape.l; ++l) {
                const double th = 2.0 * M_PI * h / shape.h;
                const double tw = 2.0 * M_PI * w / shape.w;
                const double tl = 2.0 * M_PI * l / shape.l;
                img.at(h, w, l) = 0.5 +
                                  0.20 * std::sin(th + p0) * std::cos(tw + p1) +
                                  0.15 * std::cos(tl + p2 + th) +
                                  0.10 * std::sin(2.0 * tw + p0) * std::sin(tl + p1);
            }
    return img;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace testutil
