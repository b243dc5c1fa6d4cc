#pragma once

// Denoising-diffusion machinery over flat tensors: cosine noise schedule,
// closed-form forward corruption, ancestral predictor with fixed posterior
// variance, Langevin corrector, L1 noise-prediction loss, and the
// predictor-corrector sampling loop.
//
// Step indices are 1-based: z^0 is the clean datum, tau runs over
// {1 .. steps}. alpha_bar[0] = 1 so the final predictor step is noiseless.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rng.hpp"

namespace morphoflow::ddpm {

struct NoiseSchedule {
    int steps = 0;
    double s_offset = 0.008;
    // index 0 is the tau = 0 sentinel: beta[0] = 0, alpha_bar[0] = 1
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    void check_tau(int tau) const {
        if (tau < 1 || tau > steps)
            throw std::invalid_argument("diffusion step out of range: " + std::to_string(tau) +
                                        " (steps = " + std::to_string(steps) + ")");
    }

    double posterior_variance(int tau) const {
        check_tau(tau);
        return beta[std::size_t(tau)] * (1.0 - alpha_bar[std::size_t(tau) - 1]) /
               (1.0 - alpha_bar[std::size_t(tau)]);
    }
};

inline NoiseSchedule cosine_schedule(int steps, double s_offset = 0.008) {
    if (steps < 2) throw std::invalid_argument("cosine_schedule needs at least 2 steps");
    NoiseSchedule sched;
    sched.steps = steps;
    sched.s_offset = s_offset;
    sched.beta.assign(std::size_t(steps) + 1, 0.0);
    sched.alpha.assign(std::size_t(steps) + 1, 1.0);
    sched.alpha_bar.assign(std::size_t(steps) + 1, 1.0);

    auto f = [&](double t) {
        const double a = ((t / steps + s_offset) / (1.0 + s_offset)) * M_PI / 2.0;
        const double c = std::cos(a);
        return c * c;
    };
    const double f0 = f(0.0);
    double prev_bar = 1.0;
    for (int tau = 1; tau <= steps; ++tau) {
        const double bar = f(double(tau)) / f0;
        double beta = 1.0 - bar / prev_bar;
        beta = std::min(beta, 0.999);
        beta = std::max(beta, 1e-12);
        sched.beta[std::size_t(tau)] = beta;
        sched.alpha[std::size_t(tau)] = 1.0 - beta;
        // rebuild alpha_bar from the clipped betas so the product identity
        // holds exactly
        sched.alpha_bar[std::size_t(tau)] =
            sched.alpha_bar[std::size_t(tau) - 1] * (1.0 - beta);
        prev_bar = bar;
    }
    for (int tau = 1; tau <= steps; ++tau)
        if (!(sched.alpha_bar[std::size_t(tau)] < sched.alpha_bar[std::size_t(tau) - 1]))
            throw std::runtime_error("cosine schedule: alpha_bar not strictly decreasing");
    return sched;
}

inline nlohmann::json dump_schedule(const NoiseSchedule& sched) {
    nlohmann::json j;
    j["steps"] = sched.steps;
    j["s_offset"] = sched.s_offset;
    j["beta"] = std::vector<double>(sched.beta.begin() + 1, sched.beta.end());
    j["alpha_bar"] = std::vector<double>(sched.alpha_bar.begin() + 1, sched.alpha_bar.end());
    return j;
}

using Vec = std::vector<float>;

inline void check_same_size(const Vec& a, const Vec& b, const char* op) {
    if (a.size() != b.size())
        throw std::invalid_argument(std::string(op) + ": size mismatch");
}

// z^tau = sqrt(alpha_bar) z0 + sqrt(1 - alpha_bar) eps
inline Vec forward_sample(const Vec& z0, int tau, const Vec& epsilon, const NoiseSchedule& sched) {
    sched.check_tau(tau);
    check_same_size(z0, epsilon, "forward_sample");
    const double bar = sched.alpha_bar[std::size_t(tau)];
    const float a = float(std::sqrt(bar));
    const float b = float(std::sqrt(1.0 - bar));
    Vec out(z0.size());
    for (std::size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * epsilon[i];
    return out;
}

// Ancestral update with fixed posterior variance; noiseless at tau = 1.
inline Vec predictor_step(const Vec& z_tau, const Vec& eps_hat, int tau,
                          const NoiseSchedule& sched, const Vec* noise = nullptr) {
    sched.check_tau(tau);
    check_same_size(z_tau, eps_hat, "predictor_step");
    if (noise) check_same_size(z_tau, *noise, "predictor_step noise");
    const double beta = sched.beta[std::size_t(tau)];
    const double bar = sched.alpha_bar[std::size_t(tau)];
    const double alpha = sched.alpha[std::size_t(tau)];
    const float eps_coeff = float(beta / std::sqrt(1.0 - bar));
    const float inv_sqrt_alpha = float(1.0 / std::sqrt(alpha));
    const float sigma = float(std::sqrt(sched.posterior_variance(tau)));
    Vec out(z_tau.size());
    for (std::size_t i = 0; i < z_tau.size(); ++i) {
        const float mu = inv_sqrt_alpha * (z_tau[i] - eps_coeff * eps_hat[i]);
        out[i] = noise ? mu + sigma * (*noise)[i] : mu;
    }
    return out;
}

// One Langevin refinement using the score implied by the noise estimate:
// score = -eps_hat / sqrt(1 - alpha_bar). Step size follows the
// signal-to-noise rule; snr -> 0 leaves the input untouched.
inline Vec corrector_step(const Vec& z_tau, const Vec& eps_hat, int tau,
                          const NoiseSchedule& sched, double snr, const Vec& noise) {
    sched.check_tau(tau);
    check_same_size(z_tau, eps_hat, "corrector_step");
    check_same_size(z_tau, noise, "corrector_step noise");
    if (snr < 0.0) throw std::invalid_argument("corrector_step: snr must be >= 0");
    const double bar = sched.alpha_bar[std::size_t(tau)];
    const double score_scale = -1.0 / std::sqrt(1.0 - bar);

    double score_norm2 = 0.0, noise_norm2 = 0.0;
    for (std::size_t i = 0; i < z_tau.size(); ++i) {
        const double s = score_scale * eps_hat[i];
        score_norm2 += s * s;
        noise_norm2 += double(noise[i]) * noise[i];
    }
    if (score_norm2 <= 0.0 || snr == 0.0) return z_tau;
    const double ratio = std::sqrt(noise_norm2) / std::sqrt(score_norm2);
    const double step = 2.0 * (snr * ratio) * (snr * ratio);
    const float step_f = float(step);
    const float diff_f = float(std::sqrt(2.0 * step));
    Vec out(z_tau.size());
    for (std::size_t i = 0; i < z_tau.size(); ++i) {
        const float s = float(score_scale) * eps_hat[i];
        out[i] = z_tau[i] + step_f * s + diff_f * noise[i];
    }
    return out;
}

struct SamplingFailed : std::runtime_error {
    int step;
    explicit SamplingFailed(int tau)
        : std::runtime_error("sampling produced non-finite values at step " + std::to_string(tau)),
          step(tau) {}
};

inline Vec gaussian_vec(std::size_t n, Rng& rng) {
    Vec v(n);
    for (float& x : v) x = float(rng.normal());
    return v;
}

// Single-draw Monte-Carlo estimate of the L1 noise-prediction objective:
// tau uniform over {1..steps}, eps standard normal.
template <class Model>
double diffusion_loss(Model&& model, const Vec& z0, const NoiseSchedule& sched, Rng& rng) {
    const int tau = int(rng.below(std::uint64_t(sched.steps))) + 1;
    const Vec eps = gaussian_vec(z0.size(), rng);
    const Vec z_tau = forward_sample(z0, tau, eps, sched);
    const Vec eps_hat = model(z_tau, tau);
    check_same_size(eps, eps_hat, "diffusion_loss model output");
    double acc = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i)
        acc += std::abs(double(eps[i]) - double(eps_hat[i]));
    return acc / double(eps.size());
}

// Predictor-corrector sampling: start from standard normal noise at
// tau = steps, walk down to the clean sample. M corrector applications per
// level; M = 0 is plain ancestral sampling.
template <class Model>
Vec sample(Model&& model, std::size_t size, const NoiseSchedule& sched, int corrector_M,
           double snr, Rng& rng) {
    if (corrector_M < 0) throw std::invalid_argument("sample: corrector count must be >= 0");
    Vec z = gaussian_vec(size, rng);
    for (int tau = sched.steps; tau >= 1; --tau) {
        const Vec eps_hat = model(z, tau);
        check_same_size(z, eps_hat, "sample model output");
        for (float e : eps_hat)
            if (!std::isfinite(e)) throw SamplingFailed(tau);
        if (tau > 1) {
            const Vec noise = gaussian_vec(size, rng);
            z = predictor_step(z, eps_hat, tau, sched, &noise);
        } else {
            z = predictor_step(z, eps_hat, tau, sched, nullptr);
        }
        const int level = tau - 1;
        if (level >= 1) {
            for (int m = 0; m < corrector_M; ++m) {
                const Vec eps2 = model(z, level);
                for (float e : eps2)
                    if (!std::isfinite(e)) throw SamplingFailed(level);
                const Vec noise = gaussian_vec(size, rng);
                z = corrector_step(z, eps2, level, sched, snr, noise);
            }
        }
    }
    for (float e : z)
        if (!std::isfinite(e)) throw SamplingFailed(0);
    return z;
}

} // namespace morphoflow::ddpm
