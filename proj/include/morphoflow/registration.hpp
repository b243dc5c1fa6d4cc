#pragma once

// Pairwise diffeomorphic registration: minimize
//
//     E(v) = lambda * SSD(warp(S, exp(v)), F) + smoothness(v)
//
// over a stationary velocity field v by gradient descent with step halving.
// The gradient is the exact adjoint of the discrete forward computation
// (trilinear warps, scaling-and-squaring, optional field upsampling), so it
// matches central finite differences to roundoff.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "core.hpp"
#include "diffeo.hpp"
#include "parallel.hpp"
#include "subject.hpp"

namespace morphoflow::reg {

struct RegistrationConfig {
    double lambda = 100.0;      // data-term weight
    int iterations = 200;
    double step_size = 1e-3;    // initial descent step, adapted during the run
    int squaring_steps = 7;     // K; auto-raised by the integrator when needed
    Shape3 field_shape{0, 0, 0}; // 0 means "same as the image"
    int max_halvings = 30;
    double step_growth = 1.5;

    // The flow-energy weighting parameter is the same knob as lambda in the
    // loss form used here.
    double eta() const { return lambda; }

    Shape3 resolved_field_shape(const Shape3& image_shape) const {
        return field_shape.h > 0 ? field_shape : image_shape;
    }
};

struct RegistrationResult {
    VectorField velocity;
    std::vector<double> energy_trace;
    double final_ssd = 0.0;
    double final_reg = 0.0;
    int squaring_steps_used = 0;
};

struct OptimizationFailed : std::runtime_error {
    std::vector<double> energy_trace;
    explicit OptimizationFailed(const std::string& msg, std::vector<double> trace)
        : std::runtime_error(msg), energy_trace(std::move(trace)) {}
};

inline double ssd(const ScalarVolume& a, const ScalarVolume& b) {
    if (!(a.shape == b.shape))
        throw std::invalid_argument("ssd: shapes differ: " + a.shape.str() + " vs " + b.shape.str());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc;
}

namespace detail3 {

// One finite-difference term along an axis: d = coeff*(v[plus] - v[minus]).
// Interior and wrap use central stencils, clamp boundaries one-sided.
struct DiffTerm {
    int plus, minus;
    double coeff;
};

inline DiffTerm diff_term(int i, int n, bool wrap) {
    if (wrap) return {detail::wrap_index(i + 1, n), detail::wrap_index(i - 1, n), 0.5};
    if (i > 0 && i < n - 1) return {i + 1, i - 1, 0.5};
    if (i == 0) return {1, 0, 1.0};
    return {n - 1, n - 2, 1.0};
}

} // namespace detail3

// Sum of squared finite-difference derivatives over voxels, components and
// axes.
inline double smoothness(const VectorField& v) {
    const Shape3 s = v.shape;
    if (s.h < 3 || s.w < 3 || s.l < 3)
        throw std::invalid_argument("smoothness needs extent >= 3 per axis, got " + s.str());
    const bool wrap = v.boundary == Boundary::wrap;
    const std::size_t n = v.voxels();
    double acc = 0.0;
    for (int c = 0; c < 3; ++c) {
        const double* plane = v.data.data() + std::size_t(c) * n;
        for (int h = 0; h < s.h; ++h) {
            const auto th = detail3::diff_term(h, s.h, wrap);
            for (int w = 0; w < s.w; ++w) {
                const auto tw = detail3::diff_term(w, s.w, wrap);
                for (int l = 0; l < s.l; ++l) {
                    const auto tl = detail3::diff_term(l, s.l, wrap);
                    const double dh = th.coeff * (plane[(std::size_t(th.plus) * s.w + w) * s.l + l] -
                                                  plane[(std::size_t(th.minus) * s.w + w) * s.l + l]);
                    const double dw = tw.coeff * (plane[(std::size_t(h) * s.w + tw.plus) * s.l + l] -
                                                  plane[(std::size_t(h) * s.w + tw.minus) * s.l + l]);
                    const double dl = tl.coeff * (plane[(std::size_t(h) * s.w + w) * s.l + tl.plus] -
                                                  plane[(std::size_t(h) * s.w + w) * s.l + tl.minus]);
                    acc += dh * dh + dw * dw + dl * dl;
                }
            }
        }
    }
    return acc;
}

inline void add_smoothness_gradient(const VectorField& v, VectorField& grad) {
    const Shape3 s = v.shape;
    const bool wrap = v.boundary == Boundary::wrap;
    const std::size_t n = v.voxels();
    for (int c = 0; c < 3; ++c) {
        const double* plane = v.data.data() + std::size_t(c) * n;
        double* gplane = grad.data.data() + std::size_t(c) * n;
        for (int h = 0; h < s.h; ++h) {
            const auto th = detail3::diff_term(h, s.h, wrap);
            for (int w = 0; w < s.w; ++w) {
                const auto tw = detail3::diff_term(w, s.w, wrap);
                for (int l = 0; l < s.l; ++l) {
                    const auto tl = detail3::diff_term(l, s.l, wrap);
                    auto accumulate = [&](const detail3::DiffTerm& t, std::size_t ip, std::size_t im) {
                        const double d = t.coeff * (plane[ip] - plane[im]);
                        gplane[ip] += 2.0 * d * t.coeff;
                        gplane[im] -= 2.0 * d * t.coeff;
                    };
                    accumulate(th, (std::size_t(th.plus) * s.w + w) * s.l + l,
                               (std::size_t(th.minus) * s.w + w) * s.l + l);
                    accumulate(tw, (std::size_t(h) * s.w + tw.plus) * s.l + l,
                               (std::size_t(h) * s.w + tw.minus) * s.l + l);
                    accumulate(tl, (std::size_t(h) * s.w + w) * s.l + tl.plus,
                               (std::size_t(h) * s.w + w) * s.l + tl.minus);
                }
            }
        }
    }
}

namespace detail3 {

// Trilinear sample of one component plane with its position gradient.
// The gradient accounts for clamp saturation (zero slope outside the grid).
struct SampleWithGrad {
    double value;
    double d[3];
};

inline SampleWithGrad sample_plane_grad(const double* plane, const Shape3& s, Boundary b,
                                        double x, double y, double z) {
    const auto cw = detail::locate(s, b, x, y, z);
    const double fh = cw.f[0], fw = cw.f[1], fl = cw.f[2];
    const double gh = 1.0 - fh, gw = 1.0 - fw, gl = 1.0 - fl;
    auto at = [&](int h, int w, int l) {
        return plane[(std::size_t(h) * s.w + w) * s.l + l];
    };
    const double v000 = at(cw.i0[0], cw.i0[1], cw.i0[2]);
    const double v001 = at(cw.i0[0], cw.i0[1], cw.i1[2]);
    const double v010 = at(cw.i0[0], cw.i1[1], cw.i0[2]);
    const double v011 = at(cw.i0[0], cw.i1[1], cw.i1[2]);
    const double v100 = at(cw.i1[0], cw.i0[1], cw.i0[2]);
    const double v101 = at(cw.i1[0], cw.i0[1], cw.i1[2]);
    const double v110 = at(cw.i1[0], cw.i1[1], cw.i0[2]);
    const double v111 = at(cw.i1[0], cw.i1[1], cw.i1[2]);

    const double a0 = gw * (gl * v000 + fl * v001) + fw * (gl * v010 + fl * v011);
    const double a1 = gw * (gl * v100 + fl * v101) + fw * (gl * v110 + fl * v111);

    SampleWithGrad out;
    out.value = gh * a0 + fh * a1;
    out.d[0] = (a1 - a0) * cw.dsat[0];
    out.d[1] = (gh * ((gl * v010 + fl * v011) - (gl * v000 + fl * v001)) +
                fh * ((gl * v110 + fl * v111) - (gl * v100 + fl * v101))) * cw.dsat[1];
    out.d[2] = (gh * (gw * (v001 - v000) + fw * (v011 - v010)) +
                fh * (gw * (v101 - v100) + fw * (v111 - v110))) * cw.dsat[2];
    return out;
}

// Scatter-add `value` through the trilinear weights at (x,y,z).
inline void splat_plane(double* plane, const Shape3& s, Boundary b,
                        double x, double y, double z, double value) {
    const auto cw = detail::locate(s, b, x, y, z);
    const double fh = cw.f[0], fw = cw.f[1], fl = cw.f[2];
    const double gh = 1.0 - fh, gw = 1.0 - fw, gl = 1.0 - fl;
    auto add = [&](int h, int w, int l, double wgt) {
        plane[(std::size_t(h) * s.w + w) * s.l + l] += wgt * value;
    };
    add(cw.i0[0], cw.i0[1], cw.i0[2], gh * gw * gl);
    add(cw.i0[0], cw.i0[1], cw.i1[2], gh * gw * fl);
    add(cw.i0[0], cw.i1[1], cw.i0[2], gh * fw * gl);
    add(cw.i0[0], cw.i1[1], cw.i1[2], gh * fw * fl);
    add(cw.i1[0], cw.i0[1], cw.i0[2], fh * gw * gl);
    add(cw.i1[0], cw.i0[1], cw.i1[2], fh * gw * fl);
    add(cw.i1[0], cw.i1[1], cw.i0[2], fh * fw * gl);
    add(cw.i1[0], cw.i1[1], cw.i1[2], fh * fw * fl);
}

struct SvfTrace {
    std::vector<VectorField> levels; // u_0 .. u_K
    int k = 0;
};

inline SvfTrace integrate_svf_traced(const VectorField& v, int squaring_steps) {
    SvfTrace trace;
    trace.k = diffeo::auto_raise_squaring_steps(v.max_norm(), squaring_steps);
    VectorField u = v;
    const double scale = 1.0 / double(std::uint64_t(1) << trace.k);
    for (double& x : u.data) x *= scale;
    trace.levels.push_back(u);
    for (int i = 0; i < trace.k; ++i) {
        u = diffeo::self_compose(u);
        trace.levels.push_back(u);
    }
    return trace;
}

// Adjoint of one squaring step u' = u + u o (id + u). `grad` holds dE/du'
// on entry and dE/du on exit.
inline void squaring_step_adjoint(const VectorField& u, VectorField& grad) {
    const Shape3 s = u.shape;
    const std::size_t n = u.voxels();
    VectorField out(s, u.boundary, 0.0);
    for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w)
            for (int l = 0; l < s.l; ++l) {
                const std::size_t idx = u.index(h, w, l);
                const double px = h + u.data[idx];
                const double py = w + u.data[n + idx];
                const double pz = l + u.data[2 * n + idx];
                const double gc[3] = {grad.data[idx], grad.data[n + idx], grad.data[2 * n + idx]};
                double pos_grad[3] = {0, 0, 0};
                for (int c = 0; c < 3; ++c) {
                    const auto sg = sample_plane_grad(u.data.data() + std::size_t(c) * n, s,
                                                      u.boundary, px, py, pz);
                    for (int a = 0; a < 3; ++a) pos_grad[a] += gc[c] * sg.d[a];
                    // value route: scatter gc[c] through the sampling weights
                    splat_plane(out.data.data() + std::size_t(c) * n, s, u.boundary,
                                px, py, pz, gc[c]);
                }
                // direct route plus the position route through p = x + u(x)
                out.data[idx] += gc[0] + pos_grad[0];
                out.data[n + idx] += gc[1] + pos_grad[1];
                out.data[2 * n + idx] += gc[2] + pos_grad[2];
            }
    grad = std::move(out);
}

// Adjoint of VectorField resampling (including the per-axis magnitude
// rescale): scatters output gradients back onto the source grid.
inline VectorField resample_adjoint(const Shape3& src_shape, Boundary boundary,
                                    const VectorField& grad_out) {
    VectorField grad_src(src_shape, boundary, 0.0);
    const Shape3 os = grad_out.shape;
    const std::size_t n_out = grad_out.voxels();
    const std::size_t n_src = grad_src.voxels();
    const double scale[3] = {
        double(os.h) / double(src_shape.h),
        double(os.w) / double(src_shape.w),
        double(os.l) / double(src_shape.l),
    };
    for (int h = 0; h < os.h; ++h) {
        const double x = detail::resample_coord(h, os.h, src_shape.h);
        for (int w = 0; w < os.w; ++w) {
            const double y = detail::resample_coord(w, os.w, src_shape.w);
            for (int l = 0; l < os.l; ++l) {
                const double z = detail::resample_coord(l, os.l, src_shape.l);
                const std::size_t idx = grad_out.index(h, w, l);
                for (int c = 0; c < 3; ++c)
                    splat_plane(grad_src.data.data() + std::size_t(c) * n_src, src_shape,
                                boundary, x, y, z,
                                scale[c] * grad_out.data[std::size_t(c) * n_out + idx]);
            }
        }
    }
    return grad_src;
}

} // namespace detail3

struct EnergyParts {
    double total = 0.0;
    double ssd_term = 0.0; // unweighted SSD
    double reg_term = 0.0;
    int squaring_steps_used = 0;
};

inline EnergyParts energy_parts(const VectorField& v, const ScalarVolume& source,
                                const ScalarVolume& fixed, const RegistrationConfig& cfg) {
    if (!(source.shape == fixed.shape))
        throw std::invalid_argument("energy: source and fixed shapes differ");
    EnergyParts parts;
    const VectorField* v_image = &v;
    VectorField upsampled;
    if (!(v.shape == source.shape)) {
        upsampled = resample(v, source.shape);
        v_image = &upsampled;
    }
    auto phi = diffeo::integrate_svf(*v_image, cfg.squaring_steps);
    parts.squaring_steps_used = phi.squaring_steps;
    const ScalarVolume warped = diffeo::warp(source, phi, diffeo::WarpMode::linear);
    parts.ssd_term = ssd(warped, fixed);
    parts.reg_term = smoothness(v);
    parts.total = cfg.lambda * parts.ssd_term + parts.reg_term;
    return parts;
}

inline double energy(const VectorField& v, const ScalarVolume& source,
                     const ScalarVolume& fixed, const RegistrationConfig& cfg) {
    return energy_parts(v, source, fixed, cfg).total;
}

// Energy plus its exact gradient with respect to v.
inline EnergyParts energy_with_gradient(const VectorField& v, const ScalarVolume& source,
                                        const ScalarVolume& fixed, const RegistrationConfig& cfg,
                                        VectorField& gradient) {
    if (!(source.shape == fixed.shape))
        throw std::invalid_argument("energy: source and fixed shapes differ");
    EnergyParts parts;

    const bool low_res = !(v.shape == source.shape);
    VectorField v_image = low_res ? resample(v, source.shape) : v;
    auto trace = detail3::integrate_svf_traced(v_image, cfg.squaring_steps);
    parts.squaring_steps_used = trace.k;
    const VectorField& u = trace.levels.back();

    const Shape3 s = source.shape;
    const std::size_t n = s.voxels();

    // Warp + SSD forward, dE/du backward in one pass over voxels.
    VectorField grad_u(s, v_image.boundary, 0.0);
    double ssd_acc = 0.0;
    for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w)
            for (int l = 0; l < s.l; ++l) {
                const std::size_t idx = source.index(h, w, l);
                const double px = h + u.data[idx];
                const double py = w + u.data[n + idx];
                const double pz = l + u.data[2 * n + idx];
                const auto sg = detail3::sample_plane_grad(source.data.data(), s,
                                                           source.boundary, px, py, pz);
                const double resid = sg.value - fixed.data[idx];
                ssd_acc += resid * resid;
                const double gw = 2.0 * cfg.lambda * resid;
                grad_u.data[idx] += gw * sg.d[0];
                grad_u.data[n + idx] += gw * sg.d[1];
                grad_u.data[2 * n + idx] += gw * sg.d[2];
            }
    parts.ssd_term = ssd_acc;

    // Back through the squaring ladder and the initial scaling.
    for (int k = trace.k - 1; k >= 0; --k)
        detail3::squaring_step_adjoint(trace.levels[std::size_t(k)], grad_u);
    const double scale = 1.0 / double(std::uint64_t(1) << trace.k);
    for (double& g : grad_u.data) g *= scale;

    if (low_res)
        gradient = detail3::resample_adjoint(v.shape, v.boundary, grad_u);
    else
        gradient = std::move(grad_u);

    parts.reg_term = smoothness(v);
    add_smoothness_gradient(v, gradient);
    parts.total = cfg.lambda * parts.ssd_term + parts.reg_term;
    return parts;
}

// Gradient descent with step halving. The energy trace is non-increasing;
// a step that cannot be made acceptable within max_halvings raises
// OptimizationFailed with the trace collected so far.
inline RegistrationResult register_pair(const ScalarVolume& source, const ScalarVolume& fixed,
                                        const RegistrationConfig& cfg) {
    if (!(source.shape == fixed.shape))
        throw std::invalid_argument("register_pair: source and fixed shapes differ");
    if (cfg.iterations < 1 || cfg.lambda <= 0.0 || cfg.step_size <= 0.0)
        throw std::invalid_argument("register_pair: invalid configuration");

    const Shape3 fs = cfg.resolved_field_shape(source.shape);
    VectorField v(fs, source.boundary, 0.0);
    VectorField grad(fs, source.boundary, 0.0);

    RegistrationResult result;
    EnergyParts parts = energy_with_gradient(v, source, fixed, cfg, grad);
    result.energy_trace.push_back(parts.total);

    double step = cfg.step_size;
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        VectorField candidate = v;
        bool accepted = false;
        for (int halving = 0; halving <= cfg.max_halvings; ++halving) {
            for (std::size_t i = 0; i < v.data.size(); ++i)
                candidate.data[i] = v.data[i] - step * grad.data[i];
            const double e_new = energy(candidate, source, fixed, cfg);
            if (e_new <= parts.total) {
                v = candidate;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted)
            throw OptimizationFailed(
                "registration diverged: no acceptable step after " +
                    std::to_string(cfg.max_halvings) + " halvings",
                result.energy_trace);

        const double previous = parts.total;
        parts = energy_with_gradient(v, source, fixed, cfg, grad);
        result.energy_trace.push_back(parts.total);
        step *= cfg.step_growth;

        if (previous - parts.total <= 1e-12 * std::max(1.0, std::abs(previous)))
            break; // converged to numerical precision
    }

    result.velocity = std::move(v);
    result.final_ssd = parts.ssd_term;
    result.final_reg = parts.reg_term;
    result.squaring_steps_used = parts.squaring_steps_used;
    return result;
}

// Independent solves of the baseline against each follow-up, ordered by age.
// Frames may run in parallel; failures carry the frame index.
inline VelocitySequence register_sequence(const SubjectRecord& subject,
                                          const RegistrationConfig& cfg,
                                          unsigned jobs = 1) {
    subject.validate();
    if (subject.followups.empty())
        throw std::invalid_argument("register_sequence: subject has no follow-ups");
    const std::size_t count = subject.followups.size();
    std::vector<VectorField> frames(count);
    std::vector<std::string> errors(count);
    parallel_for(count, [&](std::size_t t) {
        try {
            frames[t] = register_pair(subject.baseline, subject.followups[t], cfg).velocity;
        } catch (const std::exception& e) {
            errors[t] = e.what();
        }
    }, jobs);
    for (std::size_t t = 0; t < count; ++t)
        if (!errors[t].empty())
            throw std::runtime_error("registration of frame " + std::to_string(t + 1) +
                                     " failed: " + errors[t]);
    std::vector<double> followup_ages(subject.ages.begin() + 1, subject.ages.end());
    return VelocitySequence(std::move(frames), std::move(followup_ages));
}

} // namespace morphoflow::reg
