#pragma once

// Deterministic longitudinal phantom generator. Each subject is a smooth
// ellipsoidal "brain" with an inner spherical "ventricle" and a textured
// cortex band. Follow-ups warp the baseline by an analytic radial flow whose
// strength grows with age at a class-dependent rate: the ventricle expands
// and the surrounding tissue compresses. The exact velocity field, its
// time-1 displacement, and the baseline segmentation come back as ground
// truth alongside the images.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "diffeo.hpp"
#include "rng.hpp"
#include "subject.hpp"

namespace morphoflow::synthdata {

struct PhantomSpec {
    Shape3 shape{32, 32, 32};
    int n_subjects = 8;
    int frames = 3; // follow-ups per subject
    double age_range[2] = {60.0, 90.0};
    double class_mix[3] = {1.0 / 3, 1.0 / 3, 1.0 / 3}; // CN, MCI, AD
    double atrophy_rate[3] = {0.005, 0.015, 0.03};     // fraction of ventricle radius per year
    double noise_sigma = 0.01;
    std::uint64_t seed = 0;
    double train_fraction = 0.85;

    void validate() const {
        detail::check_shape_positive(shape);
        if (n_subjects < 1) throw std::invalid_argument("phantom spec: n_subjects must be >= 1");
        if (frames < 1) throw std::invalid_argument("phantom spec: frames must be >= 1");
        double mix = class_mix[0] + class_mix[1] + class_mix[2];
        if (std::abs(mix - 1.0) > 1e-9)
            throw std::invalid_argument("phantom spec: class mix must sum to 1");
        for (double r : atrophy_rate)
            if (r < 0.0) throw std::invalid_argument("phantom spec: atrophy rates must be >= 0");
        if (!(age_range[1] > age_range[0]))
            throw std::invalid_argument("phantom spec: empty age range");
    }
};

namespace detail2 {

inline double smoothstep(double t, double lo, double hi) {
    if (t <= lo) return 0.0;
    if (t >= hi) return 1.0;
    const double s = (t - lo) / (hi - lo);
    return s * s * (3.0 - 2.0 * s);
}

// Radial speed of the atrophy flow at radius r (positive = inward pull per
// unit time). Linear near the center, Gaussian bump peaking at the
// ventricle boundary, decaying to zero well inside the brain.
inline double radial_speed(double r, double rate_times_dage, double r_peak, double sigma) {
    const double d = (r - r_peak) / sigma;
    return rate_times_dage * r * std::exp(-0.5 * d * d);
}

// Time-1 flow of dr/dt = sign * radial_speed(r); classic RK4.
inline double flow_radius(double r0, double sign, double rate_times_dage,
                          double r_peak, double sigma, int steps = 64) {
    double r = r0;
    const double h = 1.0 / steps;
    auto f = [&](double x) { return sign * radial_speed(x, rate_times_dage, r_peak, sigma); };
    for (int i = 0; i < steps; ++i) {
        const double k1 = f(r);
        const double k2 = f(r + 0.5 * h * k1);
        const double k3 = f(r + 0.5 * h * k2);
        const double k4 = f(r + h * k3);
        r += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (r < 0.0) r = 0.0;
    }
    return r;
}

} // namespace detail2

struct GeneratedSubject {
    SubjectRecord record;
    SubjectGroundTruth ground_truth;
    std::vector<diffeo::DeformationField> gt_deformations; // one per follow-up
};

// Analytic phantom ventricle radius at Δage years after baseline: the image
// ventricle boundary is the preimage of the baseline boundary under the
// pull-warp, i.e. the outward flow of the baseline radius.
inline double ventricle_radius_at(const PhantomGeometry& p, double delta_age) {
    return detail2::flow_radius(p.ventricle_radius, +1.0, p.rate_per_year * delta_age,
                                p.ventricle_radius, p.bump_sigma, 256);
}

// The exact velocity field of the atrophy flow for a given age gap.
inline VectorField analytic_velocity(const Shape3& shape, Boundary boundary,
                                     const PhantomGeometry& p, double delta_age) {
    VectorField v(shape, boundary, 0.0);
    const std::size_t n = shape.voxels();
    const double scale = p.rate_per_year * delta_age;
    for (int h = 0; h < shape.h; ++h)
        for (int w = 0; w < shape.w; ++w)
            for (int l = 0; l < shape.l; ++l) {
                const double dx = h - p.center[0], dy = w - p.center[1], dz = l - p.center[2];
                const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
                const double d = (r - p.ventricle_radius) / p.bump_sigma;
                const double factor = -scale * std::exp(-0.5 * d * d);
                const std::size_t idx = v.index(h, w, l);
                v.data[idx] = factor * dx;
                v.data[n + idx] = factor * dy;
                v.data[2 * n + idx] = factor * dz;
            }
    return v;
}

// Exact time-1 displacement of the analytic flow (per-voxel radial RK4).
inline diffeo::DeformationField analytic_deformation(const Shape3& shape, Boundary boundary,
                                                     const PhantomGeometry& p, double delta_age) {
    VectorField u(shape, boundary, 0.0);
    const std::size_t n = shape.voxels();
    const double scale = p.rate_per_year * delta_age;
    for (int h = 0; h < shape.h; ++h)
        for (int w = 0; w < shape.w; ++w)
            for (int l = 0; l < shape.l; ++l) {
                const double dx = h - p.center[0], dy = w - p.center[1], dz = l - p.center[2];
                const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
                if (r < 1e-9) continue;
                const double r1 = detail2::flow_radius(r, -1.0, scale, p.ventricle_radius, p.bump_sigma);
                const double factor = r1 / r - 1.0;
                const std::size_t idx = u.index(h, w, l);
                u.data[idx] = factor * dx;
                u.data[n + idx] = factor * dy;
                u.data[2 * n + idx] = factor * dz;
            }
    return diffeo::DeformationField(std::move(u), 0);
}

inline ScalarVolume phantom_baseline(const Shape3& shape, Boundary boundary,
                                     const PhantomGeometry& p, double tex_phase[3]) {
    ScalarVolume img(shape, boundary, 0.0);
    for (int h = 0; h < shape.h; ++h)
        for (int w = 0; w < shape.w; ++w)
            for (int l = 0; l < shape.l; ++l) {
                const double dx = h - p.center[0], dy = w - p.center[1], dz = l - p.center[2];
                const double re = std::sqrt(dx * dx / (p.brain_radii[0] * p.brain_radii[0]) +
                                            dy * dy / (p.brain_radii[1] * p.brain_radii[1]) +
                                            dz * dz / (p.brain_radii[2] * p.brain_radii[2]));
                const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
                const double inside = 1.0 - detail2::smoothstep(re, 0.92, 1.05);
                const double band = std::exp(-0.5 * std::pow((re - 0.82) / 0.07, 2.0));
                const double tex = std::sin(0.9 * h + tex_phase[0]) *
                                   std::sin(0.8 * w + tex_phase[1]) *
                                   std::sin(1.1 * l + tex_phase[2]);
                const double tissue = 0.55 + band * 0.30 * (1.0 + 0.25 * tex);
                const double vent = 1.0 - detail2::smoothstep(r, p.ventricle_radius - 0.8,
                                                              p.ventricle_radius + 0.8);
                img.at(h, w, l) = inside * (tissue * (1.0 - vent) + 0.12 * vent);
            }
    return img;
}

inline ScalarVolume phantom_segmentation(const Shape3& shape, Boundary boundary,
                                         const PhantomGeometry& p) {
    ScalarVolume seg(shape, boundary, 0.0);
    for (int h = 0; h < shape.h; ++h)
        for (int w = 0; w < shape.w; ++w)
            for (int l = 0; l < shape.l; ++l) {
                const double dx = h - p.center[0], dy = w - p.center[1], dz = l - p.center[2];
                const double re = std::sqrt(dx * dx / (p.brain_radii[0] * p.brain_radii[0]) +
                                            dy * dy / (p.brain_radii[1] * p.brain_radii[1]) +
                                            dz * dz / (p.brain_radii[2] * p.brain_radii[2]));
                const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
                if (r < p.ventricle_radius) seg.at(h, w, l) = 2.0;
                else if (re < 1.0) seg.at(h, w, l) = 1.0;
            }
    return seg;
}

inline ClassLabel class_for_index(const PhantomSpec& spec, int index) {
    // Deterministic allocation over the mix: interleave along the cumulative
    // distribution so every prefix of subjects is close to the target mix.
    const double u = (index + 0.5) / double(spec.n_subjects);
    if (u < spec.class_mix[0]) return ClassLabel::CN;
    if (u < spec.class_mix[0] + spec.class_mix[1]) return ClassLabel::MCI;
    return ClassLabel::AD;
}

inline GeneratedSubject generate_subject(const PhantomSpec& spec, int subject_index) {
    spec.validate();
    Rng rng(mix_seed(spec.seed, std::uint64_t(subject_index)));
    const Shape3 s = spec.shape;
    const Boundary boundary = Boundary::clamp;

    PhantomGeometry geom;
    const double extent = std::min({double(s.h), double(s.w), double(s.l)});
    for (int i = 0; i < 3; ++i)
        geom.center[i] = 0.5 * double(i == 0 ? s.h : (i == 1 ? s.w : s.l)) - 0.5 +
                         rng.uniform(-0.03, 0.03) * extent;
    geom.brain_radii[0] = (0.38 + rng.uniform(-0.02, 0.02)) * double(s.h);
    geom.brain_radii[1] = (0.36 + rng.uniform(-0.02, 0.02)) * double(s.w);
    geom.brain_radii[2] = (0.38 + rng.uniform(-0.02, 0.02)) * double(s.l);
    geom.ventricle_radius = (0.34 + rng.uniform(-0.03, 0.03)) *
                            std::min({geom.brain_radii[0], geom.brain_radii[1], geom.brain_radii[2]});
    geom.bump_sigma = 0.30 * std::min({geom.brain_radii[0], geom.brain_radii[1], geom.brain_radii[2]});

    GeneratedSubject out;
    out.record.subject_id = "subject_" + std::to_string(subject_index);
    out.record.label = class_for_index(spec, subject_index);
    geom.rate_per_year = spec.atrophy_rate[int(out.record.label)];

    double tex_phase[3] = {rng.uniform(0, 6.28), rng.uniform(0, 6.28), rng.uniform(0, 6.28)};
    const ScalarVolume clean = phantom_baseline(s, boundary, geom, tex_phase);

    // ages: baseline plus strictly increasing follow-ups
    const double span = spec.age_range[1] - spec.age_range[0];
    double age = spec.age_range[0] + rng.uniform(0.1, 0.5) * span;
    out.record.ages.push_back(age);
    for (int t = 0; t < spec.frames; ++t) {
        age += rng.uniform(1.5, 2.5);
        out.record.ages.push_back(age);
    }

    out.record.baseline = clean;
    if (spec.noise_sigma > 0.0)
        for (double& v : out.record.baseline.data) v += rng.normal(0.0, spec.noise_sigma);

    for (int t = 0; t < spec.frames; ++t) {
        const double delta_age = out.record.ages[t + 1] - out.record.ages[0];
        auto phi = analytic_deformation(s, boundary, geom, delta_age);
        ScalarVolume frame = diffeo::warp(clean, phi, diffeo::WarpMode::linear);
        if (spec.noise_sigma > 0.0)
            for (double& v : frame.data) v += rng.normal(0.0, spec.noise_sigma);
        out.record.followups.push_back(std::move(frame));
        out.ground_truth.velocities.push_back(analytic_velocity(s, boundary, geom, delta_age));
        out.gt_deformations.push_back(std::move(phi));
        out.record.synthetic.push_back(false);
    }

    out.record.segmentation = phantom_segmentation(s, boundary, geom);
    out.ground_truth.segmentation = out.record.segmentation;
    out.ground_truth.phantom = geom;
    out.record.validate();
    return out;
}

struct DatasetIndex {
    struct Entry {
        std::string subject_id;
        std::string dir; // relative to the index file
        int label = 0;
        std::string split; // "train" or "test"
    };
    std::filesystem::path root;
    std::vector<Entry> subjects;

    std::vector<Entry> split_subjects(const std::string& which) const {
        std::vector<Entry> out;
        for (const auto& e : subjects)
            if (e.split == which) out.push_back(e);
        return out;
    }
};

inline DatasetIndex generate_dataset(const PhantomSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    std::filesystem::create_directories(out_dir);

    DatasetIndex index;
    index.root = out_dir;
    const int n_test = std::clamp(int(std::lround((1.0 - spec.train_fraction) * spec.n_subjects)),
                                  spec.n_subjects > 1 ? 1 : 0, spec.n_subjects - 1);
    for (int i = 0; i < spec.n_subjects; ++i) {
        GeneratedSubject g = generate_subject(spec, i);
        const std::string rel = g.record.subject_id;
        manifest::save_subject(out_dir / rel, g.record, &g.ground_truth);
        DatasetIndex::Entry e;
        e.subject_id = g.record.subject_id;
        e.dir = rel;
        e.label = int(g.record.label);
        e.split = (i >= spec.n_subjects - n_test) ? "test" : "train";
        index.subjects.push_back(e);
    }

    nlohmann::json j;
    j["format_version"] = 1;
    j["seed"] = spec.seed;
    j["shape"] = manifest::shape_to_json(spec.shape);
    j["frames"] = spec.frames;
    j["n_subjects"] = spec.n_subjects;
    j["class_mix"] = {spec.class_mix[0], spec.class_mix[1], spec.class_mix[2]};
    j["atrophy_rates"] = {spec.atrophy_rate[0], spec.atrophy_rate[1], spec.atrophy_rate[2]};
    j["noise_sigma"] = spec.noise_sigma;
    j["age_range"] = {spec.age_range[0], spec.age_range[1]};
    j["train_fraction"] = spec.train_fraction;
    nlohmann::json subjects = nlohmann::json::array();
    for (const auto& e : index.subjects)
        subjects.push_back({{"subject_id", e.subject_id},
                            {"dir", e.dir},
                            {"label", e.label},
                            {"split", e.split}});
    j["subjects"] = subjects;
    manifest::write_json_file(out_dir / "index.json", j);
    return index;
}

inline DatasetIndex load_dataset_index(const std::filesystem::path& dataset_dir) {
    const auto j = manifest::read_json_file(dataset_dir / "index.json");
    DatasetIndex index;
    index.root = dataset_dir;
    for (const auto& e : j.at("subjects")) {
        DatasetIndex::Entry entry;
        entry.subject_id = e.at("subject_id").get<std::string>();
        entry.dir = e.at("dir").get<std::string>();
        entry.label = e.at("label").get<int>();
        entry.split = e.at("split").get<std::string>();
        index.subjects.push_back(entry);
    }
    return index;
}

} // namespace morphoflow::synthdata
