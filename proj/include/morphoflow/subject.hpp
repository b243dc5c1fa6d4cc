#pragma once

// Longitudinal subject records and their on-disk manifest format.
//
// A subject directory holds:
//   manifest.json
//   vol_0.raw .. vol_T.raw          baseline + follow-up volumes
//   seg.raw                         optional baseline label map
//   gt_vel_1.raw .. gt_vel_T.raw    optional ground-truth velocity fields
//
// manifest.json keys: subject_id, shape [H,W,L], ages (baseline first,
// strictly increasing), label (0=CN, 1=MCI, 2=AD), files, synthetic_flags,
// optional ground_truth {velocities, segmentation, phantom}.

#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"

namespace morphoflow {

enum class ClassLabel : int { CN = 0, MCI = 1, AD = 2 };

inline const char* class_name(ClassLabel y) {
    switch (y) {
        case ClassLabel::CN: return "CN";
        case ClassLabel::MCI: return "MCI";
        default: return "AD";
    }
}

inline ClassLabel class_from_string(const std::string& s) {
    if (s == "CN" || s == "cn" || s == "0") return ClassLabel::CN;
    if (s == "MCI" || s == "mci" || s == "1") return ClassLabel::MCI;
    if (s == "AD" || s == "ad" || s == "2") return ClassLabel::AD;
    throw std::invalid_argument("unknown class label: " + s + " (expected CN, MCI or AD)");
}

inline ClassLabel class_from_int(int v) {
    if (v < 0 || v > 2) throw std::invalid_argument("class label out of range: " + std::to_string(v));
    return ClassLabel(v);
}

struct SubjectRecord {
    std::string subject_id;
    ScalarVolume baseline;
    std::vector<ScalarVolume> followups;
    std::vector<double> ages; // baseline age first; |ages| = |followups| + 1
    ClassLabel label = ClassLabel::CN;
    std::optional<ScalarVolume> segmentation; // aligned to baseline
    std::vector<bool> synthetic;              // per follow-up provenance

    void validate() const {
        if (ages.size() != followups.size() + 1)
            throw std::invalid_argument("subject " + subject_id + ": |ages| must be |followups|+1");
        for (std::size_t i = 1; i < ages.size(); ++i)
            if (!(ages[i] > ages[i - 1]))
                throw std::invalid_argument("subject " + subject_id + ": ages must be strictly increasing");
        for (const auto& f : followups)
            if (!(f.shape == baseline.shape))
                throw std::invalid_argument("subject " + subject_id + ": follow-up shape differs from baseline");
        if (segmentation && !(segmentation->shape == baseline.shape))
            throw std::invalid_argument("subject " + subject_id + ": segmentation shape differs from baseline");
        if (!synthetic.empty() && synthetic.size() != followups.size())
            throw std::invalid_argument("subject " + subject_id + ": synthetic flags length mismatch");
    }

    int followup_count() const { return int(followups.size()); }
};

// Analytic phantom geometry, kept in the manifest so downstream checks can
// rebuild exact ground truth without re-deriving it from voxels.
struct PhantomGeometry {
    double center[3] = {0, 0, 0};
    double brain_radii[3] = {0, 0, 0};
    double ventricle_radius = 0.0;
    double bump_sigma = 0.0;
    double rate_per_year = 0.0; // peak displacement fraction of ventricle radius
};

struct SubjectGroundTruth {
    std::vector<VectorField> velocities; // one per follow-up
    std::optional<ScalarVolume> segmentation;
    std::optional<PhantomGeometry> phantom;
};

namespace manifest {

using nlohmann::json;

inline json shape_to_json(const Shape3& s) { return json::array({s.h, s.w, s.l}); }

inline Shape3 shape_from_json(const json& j) {
    if (!j.is_array() || j.size() != 3)
        throw std::runtime_error("manifest: shape must be a 3-element array");
    return Shape3{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << j.dump(2) << "\n";
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    json j;
    is >> j;
    return j;
}

// Writes volumes plus manifest.json into dir. Ground-truth blocks are
// emitted only when present.
inline void save_subject(const std::filesystem::path& dir, const SubjectRecord& rec,
                         const SubjectGroundTruth* gt = nullptr) {
    rec.validate();
    std::filesystem::create_directories(dir);
    json j;
    j["subject_id"] = rec.subject_id;
    j["shape"] = shape_to_json(rec.baseline.shape);
    j["ages"] = rec.ages;
    j["label"] = int(rec.label);
    j["boundary"] = boundary_name(rec.baseline.boundary);

    std::vector<std::string> files;
    files.push_back("vol_0.raw");
    write_raw((dir / "vol_0.raw").string(), rec.baseline);
    for (std::size_t t = 0; t < rec.followups.size(); ++t) {
        std::string name = "vol_" + std::to_string(t + 1) + ".raw";
        write_raw((dir / name).string(), rec.followups[t]);
        files.push_back(name);
    }
    j["files"] = files;

    std::vector<bool> flags = rec.synthetic;
    flags.resize(rec.followups.size(), false);
    j["synthetic_flags"] = flags;

    if (gt) {
        json g;
        if (!gt->velocities.empty()) {
            std::vector<std::string> vel_files;
            for (std::size_t t = 0; t < gt->velocities.size(); ++t) {
                std::string name = "gt_vel_" + std::to_string(t + 1) + ".raw";
                write_raw((dir / name).string(), gt->velocities[t]);
                vel_files.push_back(name);
            }
            g["velocities"] = vel_files;
        }
        if (gt->segmentation) {
            write_raw((dir / "seg.raw").string(), *gt->segmentation);
            g["segmentation"] = "seg.raw";
        }
        if (gt->phantom) {
            const auto& p = *gt->phantom;
            g["phantom"] = {
                {"center", {p.center[0], p.center[1], p.center[2]}},
                {"brain_radii", {p.brain_radii[0], p.brain_radii[1], p.brain_radii[2]}},
                {"ventricle_radius", p.ventricle_radius},
                {"bump_sigma", p.bump_sigma},
                {"rate_per_year", p.rate_per_year},
            };
        }
        j["ground_truth"] = g;
    }
    write_json_file(dir / "manifest.json", j);
}

inline SubjectRecord load_subject(const std::filesystem::path& dir,
                                  SubjectGroundTruth* gt_out = nullptr) {
    const json j = read_json_file(dir / "manifest.json");
    SubjectRecord rec;
    rec.subject_id = j.at("subject_id").get<std::string>();
    const Shape3 shape = shape_from_json(j.at("shape"));
    rec.ages = j.at("ages").get<std::vector<double>>();
    rec.label = class_from_int(j.at("label").get<int>());
    Boundary b = Boundary::clamp;
    if (j.contains("boundary")) b = boundary_from_name(j["boundary"].get<std::string>());

    const auto files = j.at("files").get<std::vector<std::string>>();
    if (files.empty()) throw std::runtime_error("manifest lists no volume files: " + dir.string());
    rec.baseline = read_raw_volume((dir / files[0]).string(), shape, b);
    for (std::size_t t = 1; t < files.size(); ++t)
        rec.followups.push_back(read_raw_volume((dir / files[t]).string(), shape, b));
    if (j.contains("synthetic_flags"))
        rec.synthetic = j["synthetic_flags"].get<std::vector<bool>>();

    if (j.contains("ground_truth")) {
        const json& g = j["ground_truth"];
        if (g.contains("segmentation")) {
            auto seg = read_raw_volume((dir / g["segmentation"].get<std::string>()).string(), shape, b);
            rec.segmentation = seg;
            if (gt_out) gt_out->segmentation = std::move(seg);
        }
        if (gt_out) {
            if (g.contains("velocities"))
                for (const auto& name : g["velocities"])
                    gt_out->velocities.push_back(
                        read_raw_field((dir / name.get<std::string>()).string(), shape, b));
            if (g.contains("phantom")) {
                PhantomGeometry p;
                const json& pj = g["phantom"];
                for (int i = 0; i < 3; ++i) {
                    p.center[i] = pj.at("center")[i].get<double>();
                    p.brain_radii[i] = pj.at("brain_radii")[i].get<double>();
                }
                p.ventricle_radius = pj.at("ventricle_radius").get<double>();
                p.bump_sigma = pj.at("bump_sigma").get<double>();
                p.rate_per_year = pj.at("rate_per_year").get<double>();
                gt_out->phantom = p;
            }
        }
    }
    rec.validate();
    return rec;
}

} // namespace manifest
} // namespace morphoflow
