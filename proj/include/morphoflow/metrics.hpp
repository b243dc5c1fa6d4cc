#pragma once

// Quantitative evaluation: PSNR, sliding-window 3D SSIM, Dice overlap.

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "core.hpp"

namespace morphoflow::metrics {

constexpr double psnr_cap_db = 99.0;

inline void check_same_shape(const ScalarVolume& a, const ScalarVolume& b, const char* op) {
    if (!(a.shape == b.shape))
        throw std::invalid_argument(std::string(op) + ": shapes differ: " +
                                    a.shape.str() + " vs " + b.shape.str());
}

inline double mse(const ScalarVolume& a, const ScalarVolume& b) {
    check_same_shape(a, b, "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / double(a.data.size());
}

// Reference data range = max - min of the reference volume when the caller
// does not provide one.
inline double default_data_range(const ScalarVolume& ref) {
    const auto [lo, hi] = std::minmax_element(ref.data.begin(), ref.data.end());
    const double r = *hi - *lo;
    return r > 0.0 ? r : 1.0;
}

inline double psnr(const ScalarVolume& a, const ScalarVolume& b, double data_range) {
    check_same_shape(a, b, "psnr");
    if (!(data_range > 0.0))
        throw std::invalid_argument("psnr: data_range must be positive");
    const double m = mse(a, b);
    if (m < 1e-12) return psnr_cap_db;
    return std::min(psnr_cap_db, 10.0 * std::log10(data_range * data_range / m));
}

inline double psnr(const ScalarVolume& a, const ScalarVolume& b) {
    return psnr(a, b, default_data_range(a));
}

// Mean of the standard SSIM formula over all fully-contained window
// positions. Box window, C1 = (k1*range)^2, C2 = (k2*range)^2.
inline double ssim3d(const ScalarVolume& a, const ScalarVolume& b,
                     int window = 7, double k1 = 0.01, double k2 = 0.03,
                     double data_range = 0.0) {
    check_same_shape(a, b, "ssim3d");
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("ssim3d: window must be odd and positive");
    const Shape3 s = a.shape;
    if (window > s.h || window > s.w || window > s.l)
        throw std::invalid_argument("ssim3d: window larger than volume extent");
    if (data_range <= 0.0) data_range = default_data_range(a);
    const double c1 = (k1 * data_range) * (k1 * data_range);
    const double c2 = (k2 * data_range) * (k2 * data_range);
    const double wn = double(window) * window * window;

    double total = 0.0;
    std::size_t count = 0;
    for (int h = 0; h + window <= s.h; ++h) {
        for (int w = 0; w + window <= s.w; ++w) {
            for (int l = 0; l + window <= s.l; ++l) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (int dh = 0; dh < window; ++dh)
                    for (int dw = 0; dw < window; ++dw)
                        for (int dl = 0; dl < window; ++dl) {
                            const double va = a.at(h + dh, w + dw, l + dl);
                            const double vb = b.at(h + dh, w + dw, l + dl);
                            sa += va; sb += vb;
                            saa += va * va; sbb += vb * vb; sab += va * vb;
                        }
                const double ma = sa / wn, mb = sb / wn;
                const double va = saa / wn - ma * ma;
                const double vb = sbb / wn - mb * mb;
                const double cov = sab / wn - ma * mb;
                const double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                total += num / den;
                ++count;
            }
        }
    }
    return total / double(count);
}

// 2|A n B| / (|A| + |B|) for one label value; empty-vs-empty counts as
// perfect overlap.
inline double dice(const ScalarVolume& a, const ScalarVolume& b, double label) {
    check_same_shape(a, b, "dice");
    std::size_t in_a = 0, in_b = 0, in_both = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool pa = a.data[i] == label;
        const bool pb = b.data[i] == label;
        in_a += pa;
        in_b += pb;
        in_both += pa && pb;
    }
    if (in_a + in_b == 0) return 1.0;
    return 2.0 * double(in_both) / double(in_a + in_b);
}

} // namespace morphoflow::metrics
