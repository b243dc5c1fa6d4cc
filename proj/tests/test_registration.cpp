#include <catch2/catch_amalgamated.hpp>

#include "morphoflow/registration.hpp"
#include "morphoflow/metrics.hpp"
#include "helpers.hpp"

using namespace morphoflow;
using testutil::smooth_phantom;
using testutil::smooth_random_field;

TEST_CASE("ssd basics and brute-force agreement", "[registration]") {
    Rng rng(1);
    ScalarVolume a({5, 5, 5}, Boundary::clamp);
    for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
    CHECK(reg::ssd(a, a) == 0.0);

    ScalarVolume b = a;
    for (double& v : b.data) v += 1.0;
    CHECK(reg::ssd(a, b) == Catch::Approx(125.0).margin(1e-10));

    ScalarVolume c({5, 5, 5}, Boundary::clamp);
    for (double& v : c.data) v = rng.uniform(-1.0, 1.0);
    double oracle = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        oracle += (a.data[i] - c.data[i]) * (a.data[i] - c.data[i]);
    CHECK(reg::ssd(a, c) == oracle);

    ScalarVolume d({4, 5, 5}, Boundary::clamp, 0.0);
    CHECK_THROWS_AS(reg::ssd(a, d), std::invalid_argument);
}

TEST_CASE("smoothness of a constant field is zero", "[registration]") {
    VectorField v({6, 6, 6}, Boundary::clamp, 1.7);
    CHECK(reg::smoothness(v) == 0.0);
}

TEST_CASE("smoothness of a single-axis ramp counts one per interior voxel", "[registration]") {
    VectorField v({8, 6, 6}, Boundary::clamp, 0.0);
    for (int h = 0; h < 8; ++h)
        for (int w = 0; w < 6; ++w)
            for (int l = 0; l < 6; ++l) v.at(0, h, w, l) = double(h);
    // the h-derivative of component 0 is 1 everywhere (one-sided stencils
    // included), all other derivatives vanish
    CHECK(reg::smoothness(v) == Catch::Approx(8.0 * 6.0 * 6.0).margin(1e-10));
}

TEST_CASE("smoothness matches a brute-force oracle", "[registration]") {
    for (Boundary b : {Boundary::clamp, Boundary::wrap}) {
        const auto v = smooth_random_field({6, 5, 7}, b, 2.0, 19);
        double oracle = 0.0;
        const bool wrap = b == Boundary::wrap;
        const int dims[3] = {6, 5, 7};
        for (int c = 0; c < 3; ++c)
            for (int h = 0; h < 6; ++h)
                for (int w = 0; w < 5; ++w)
                    for (int l = 0; l < 7; ++l)
                        for (int axis = 0; axis < 3; ++axis) {
                            const int i = axis == 0 ? h : axis == 1 ? w : l;
                            const int n = dims[axis];
                            auto fetch = [&](int j) {
                                int hh = h, ww = w, ll = l;
                                (axis == 0 ? hh : axis == 1 ? ww : ll) = j;
                                return v.fetch(c, hh, ww, ll);
                            };
                            double d;
                            if (wrap || (i > 0 && i < n - 1))
                                d = 0.5 * (fetch(i + 1) - fetch(i - 1));
                            else
                                d = i == 0 ? fetch(1) - fetch(0) : fetch(n - 1) - fetch(n - 2);
                            oracle += d * d;
                        }
        CHECK(reg::smoothness(v) == Catch::Approx(oracle).margin(1e-9));
    }
}

TEST_CASE("energy reduces to its closed forms at v = 0", "[registration]") {
    const auto s = smooth_phantom({8, 8, 8}, Boundary::wrap, 2);
    reg::RegistrationConfig cfg;
    cfg.lambda = 100.0;
    VectorField zero({8, 8, 8}, Boundary::wrap, 0.0);
    CHECK(reg::energy(zero, s, s, cfg) == 0.0);

    auto f = smooth_phantom({8, 8, 8}, Boundary::wrap, 3);
    CHECK(reg::energy(zero, s, f, cfg) == Catch::Approx(cfg.lambda * reg::ssd(s, f)).margin(1e-9));
}

TEST_CASE("the regularizer is independent of the images", "[registration]") {
    const auto v = smooth_random_field({8, 8, 8}, Boundary::wrap, 0.5, 5);
    const auto s1 = smooth_phantom({8, 8, 8}, Boundary::wrap, 6);
    const auto f1 = smooth_phantom({8, 8, 8}, Boundary::wrap, 7);
    const auto s2 = smooth_phantom({8, 8, 8}, Boundary::wrap, 8);
    const auto f2 = smooth_phantom({8, 8, 8}, Boundary::wrap, 9);
    reg::RegistrationConfig cfg;
    const auto p1 = reg::energy_parts(v, s1, f1, cfg);
    const auto p2 = reg::energy_parts(v, s2, f2, cfg);
    CHECK(p1.reg_term == p2.reg_term);
}

static void check_energy_gradient(const Shape3& field_shape, const Shape3& image_shape,
                                  std::uint64_t seed) {
    const auto source = smooth_phantom(image_shape, Boundary::wrap, seed);
    const auto fixed = smooth_phantom(image_shape, Boundary::wrap, seed + 1);
    auto v = smooth_random_field(field_shape, Boundary::wrap, 0.8, seed + 2);

    reg::RegistrationConfig cfg;
    cfg.lambda = 100.0;
    VectorField grad(field_shape, Boundary::wrap, 0.0);
    reg::energy_with_gradient(v, source, fixed, cfg, grad);

    Rng rng(seed + 3);
    const double h = 1e-5;
    for (int probe = 0; probe < 5; ++probe) {
        VectorField dir(field_shape, Boundary::wrap, 0.0);
        double norm = 0.0;
        for (double& x : dir.data) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (double& x : dir.data) x /= norm;

        double analytic = 0.0;
        for (std::size_t i = 0; i < grad.data.size(); ++i)
            analytic += grad.data[i] * dir.data[i];

        VectorField plus = v, minus = v;
        for (std::size_t i = 0; i < v.data.size(); ++i) {
            plus.data[i] += h * dir.data[i];
            minus.data[i] -= h * dir.data[i];
        }
        const double fd = (reg::energy(plus, source, fixed, cfg) -
                           reg::energy(minus, source, fixed, cfg)) / (2.0 * h);
        CHECK(std::abs(analytic - fd) < 1e-3 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("energy gradient matches finite differences", "[registration]") {
    check_energy_gradient({8, 8, 8}, {8, 8, 8}, 100);
}

TEST_CASE("energy gradient matches finite differences at low field resolution", "[registration]") {
    check_energy_gradient({6, 6, 6}, {12, 12, 12}, 200);
}

TEST_CASE("registering a volume to itself yields a near-zero field", "[registration]") {
    const auto s = smooth_phantom({12, 12, 12}, Boundary::wrap, 10);
    reg::RegistrationConfig cfg;
    cfg.iterations = 50;
    const auto result = reg::register_pair(s, s, cfg);
    CHECK(result.velocity.max_norm() < 0.05);
    for (std::size_t i = 1; i < result.energy_trace.size(); ++i)
        CHECK(result.energy_trace[i] <= result.energy_trace[i - 1]);
}

TEST_CASE("a wrap translation is recovered by registration", "[registration]") {
    const auto s = testutil::periodic_texture({16, 16, 16}, 11);
    VectorField shift({16, 16, 16}, Boundary::wrap, 0.0);
    const std::size_t n = shift.voxels();
    for (std::size_t i = 0; i < n; ++i) shift.data[i] = 2.0;
    const auto f = diffeo::warp(s, diffeo::DeformationField(shift, 0));

    reg::RegistrationConfig cfg;
    cfg.lambda = 100.0;
    cfg.iterations = 300;
    const auto result = reg::register_pair(s, f, cfg);

    const double initial_ssd = reg::ssd(s, f);
    CHECK(result.final_ssd <= 0.1 * initial_ssd);

    const auto phi = diffeo::integrate_svf(result.velocity, cfg.squaring_steps);
    double mean_h = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean_h += phi.displacement.data[i];
    mean_h /= double(n);
    CHECK(std::abs(mean_h - 2.0) < 0.2);
}

TEST_CASE("energy trace invariant: total = lambda*ssd + reg", "[registration]") {
    const auto s = smooth_phantom({10, 10, 10}, Boundary::wrap, 13);
    const auto v = smooth_random_field({10, 10, 10}, Boundary::wrap, 1.0, 14);
    const auto f = diffeo::warp(s, diffeo::integrate_svf(v, 7));
    reg::RegistrationConfig cfg;
    cfg.iterations = 40;
    const auto result = reg::register_pair(s, f, cfg);
    const double recomputed = cfg.lambda * result.final_ssd + result.final_reg;
    CHECK(std::abs(result.energy_trace.back() - recomputed) <=
          1e-6 * std::max(1.0, std::abs(recomputed)));
}

TEST_CASE("doubling lambda never increases the final ssd", "[registration]") {
    for (std::uint64_t seed : {20ULL, 21ULL, 22ULL}) {
        const auto s = smooth_phantom({10, 10, 10}, Boundary::wrap, seed);
        const auto v = smooth_random_field({10, 10, 10}, Boundary::wrap, 1.2, seed + 50);
        const auto f = diffeo::warp(s, diffeo::integrate_svf(v, 7));
        reg::RegistrationConfig cfg;
        cfg.iterations = 80;
        cfg.lambda = 50.0;
        const double ssd_lo = reg::register_pair(s, f, cfg).final_ssd;
        cfg.lambda = 100.0;
        const double ssd_hi = reg::register_pair(s, f, cfg).final_ssd;
        CHECK(ssd_hi <= ssd_lo * (1.0 + 1e-9));
    }
}

TEST_CASE("register_sequence keeps frame count and ages", "[registration]") {
    SubjectRecord rec;
    rec.subject_id = "seq";
    rec.baseline = smooth_phantom({10, 10, 10}, Boundary::wrap, 30);
    rec.ages = {70.0, 72.0, 74.5};
    rec.followups.push_back(rec.baseline); // identical: near-zero velocity
    const auto v = smooth_random_field({10, 10, 10}, Boundary::wrap, 1.0, 31);
    rec.followups.push_back(diffeo::warp(rec.baseline, diffeo::integrate_svf(v, 7)));

    reg::RegistrationConfig cfg;
    cfg.iterations = 60;
    const auto seq = reg::register_sequence(rec, cfg, 2);
    REQUIRE(seq.frame_count() == 2);
    CHECK(seq.ages == std::vector<double>{72.0, 74.5});
    CHECK(seq.frames[0].max_norm() < 0.05);
    CHECK(seq.frames[1].max_norm() > seq.frames[0].max_norm());
}

TEST_CASE("register_pair validates configuration and shapes", "[registration]") {
    const auto s = smooth_phantom({8, 8, 8}, Boundary::wrap, 40);
    ScalarVolume other({9, 8, 8}, Boundary::wrap, 0.0);
    reg::RegistrationConfig cfg;
    CHECK_THROWS_AS(reg::register_pair(s, other, cfg), std::invalid_argument);
    cfg.iterations = 0;
    CHECK_THROWS_AS(reg::register_pair(s, s, cfg), std::invalid_argument);
}
