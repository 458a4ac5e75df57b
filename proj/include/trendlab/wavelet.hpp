#pragma once

// db4 discrete wavelet transform, soft-threshold denoising and the inverse
// transform. Two boundary handlings: periodic (orthogonal, with odd-length
// bookkeeping) and symmetric (mirror extension, pywt-compatible lengths).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace trendlab::wav {

enum class Padding { periodic, symmetric };

inline std::string to_string(Padding p) {
    return p == Padding::periodic ? "periodic" : "symmetric";
}

inline Padding padding_from_string(const std::string& s) {
    if (s == "periodic") return Padding::periodic;
    if (s == "symmetric") return Padding::symmetric;
    throw std::invalid_argument("unknown padding mode: " + s);
}

struct FilterBank {
    static constexpr std::size_t length = 8;
    std::array<double, length> dec_lo{}, dec_hi{}, rec_lo{}, rec_hi{};

    static FilterBank db4() {
        FilterBank fb;
        // Daubechies-4 scaling coefficients (sum sqrt(2), unit norm)
        fb.dec_lo = {0.23037781330885523, 0.71484657055254153, 0.63088076792959036,
                     -0.02798376941698385, -0.18703481171888114, 0.03084138183598697,
                     0.03288301166698295, -0.01059740178499728};
        for (std::size_t k = 0; k < length; ++k) {
            double sign = (k % 2 == 0) ? 1.0 : -1.0;
            fb.dec_hi[k] = sign * fb.dec_lo[length - 1 - k];
            fb.rec_lo[k] = fb.dec_lo[length - 1 - k];
        }
        for (std::size_t k = 0; k < length; ++k) fb.rec_hi[k] = fb.dec_hi[length - 1 - k];
        fb.validate();
        return fb;
    }

    void validate() const {
        double lo_sum = 0.0, hi_sum = 0.0, lo_norm = 0.0, hi_norm = 0.0;
        for (std::size_t k = 0; k < length; ++k) {
            lo_sum += dec_lo[k];
            hi_sum += dec_hi[k];
            lo_norm += dec_lo[k] * dec_lo[k];
            hi_norm += dec_hi[k] * dec_hi[k];
        }
        const double sqrt2 = std::sqrt(2.0);
        if (std::fabs(lo_sum - sqrt2) > 1e-10) throw std::runtime_error("filter bank: lowpass sum != sqrt(2)");
        if (std::fabs(hi_sum) > 1e-10) throw std::runtime_error("filter bank: highpass sum != 0");
        if (std::fabs(lo_norm - 1.0) > 1e-10 || std::fabs(hi_norm - 1.0) > 1e-10)
            throw std::runtime_error("filter bank: filters not unit norm");
        for (std::size_t k = 0; k < length; ++k) {
            double sign = (k % 2 == 0) ? 1.0 : -1.0;
            if (std::fabs(dec_hi[k] - sign * dec_lo[length - 1 - k]) > 1e-10)
                throw std::runtime_error("filter bank: quadrature-mirror relation violated");
        }
    }
};

struct Decomposition {
    std::vector<double> approximation;                // deepest level
    std::vector<std::vector<double>> details;         // one per level, finest LAST
    std::size_t levels = 0;
    std::size_t original_length = 0;
    Padding padding = Padding::symmetric;
    std::vector<std::size_t> level_lengths;           // input length at each level, outermost first
};

namespace detail {

// symmetric (half-point, edge-repeating) index reflection
inline std::size_t sym_index(std::ptrdiff_t j, std::size_t n) {
    auto sn = static_cast<std::ptrdiff_t>(n);
    while (j < 0 || j >= sn) {
        if (j < 0) j = -j - 1;
        if (j >= sn) j = 2 * sn - 1 - j;
    }
    return static_cast<std::size_t>(j);
}

inline void dwt_step(const std::vector<double>& x, const FilterBank& fb, Padding pad,
                     std::vector<double>& a, std::vector<double>& d) {
    constexpr std::size_t L = FilterBank::length;
    std::size_t n = x.size();
    if (pad == Padding::periodic) {
        std::vector<double> xe = x;
        if (n % 2 != 0) xe.push_back(x.back());
        std::size_t ne = xe.size(), half = ne / 2;
        a.assign(half, 0.0);
        d.assign(half, 0.0);
        for (std::size_t i = 0; i < half; ++i) {
            double sa = 0.0, sd = 0.0;
            for (std::size_t k = 0; k < L; ++k) {
                double xv = xe[(2 * i + k) % ne];
                sa += fb.dec_lo[k] * xv;
                sd += fb.dec_hi[k] * xv;
            }
            a[i] = sa;
            d[i] = sd;
        }
    } else {
        std::size_t out_len = (n + L - 1) / 2;
        a.assign(out_len, 0.0);
        d.assign(out_len, 0.0);
        for (std::size_t i = 0; i < out_len; ++i) {
            double sa = 0.0, sd = 0.0;
            for (std::size_t k = 0; k < L; ++k) {
                // correlation of the mirrored-extended signal with the
                // time-reversed decomposition filters, downsampled at odd taps
                std::ptrdiff_t src = static_cast<std::ptrdiff_t>(2 * i + 1 + k) -
                                     static_cast<std::ptrdiff_t>(L - 1);
                double xv = x[sym_index(src, n)];
                sa += fb.dec_lo[L - 1 - k] * xv;
                sd += fb.dec_hi[L - 1 - k] * xv;
            }
            a[i] = sa;
            d[i] = sd;
        }
    }
}

inline std::vector<double> idwt_step(const std::vector<double>& a, const std::vector<double>& d,
                                     const FilterBank& fb, Padding pad, std::size_t out_len) {
    constexpr std::size_t L = FilterBank::length;
    if (a.size() != d.size())
        throw std::runtime_error("reconstruction error: approximation/detail length mismatch");
    std::size_t half = a.size();
    if (pad == Padding::periodic) {
        std::size_t n = 2 * half;
        if (out_len != n && out_len + 1 != n)
            throw std::runtime_error("reconstruction error: inconsistent coefficient lengths");
        std::vector<double> y(n, 0.0);
        for (std::size_t i = 0; i < half; ++i)
            for (std::size_t k = 0; k < L; ++k) {
                std::size_t m = (2 * i + k) % n;
                y[m] += fb.dec_lo[k] * a[i] + fb.dec_hi[k] * d[i];
            }
        y.resize(out_len);
        return y;
    }
    // upsample, convolve with reconstruction filters, keep the centre slice
    std::size_t up_len = 2 * half;
    std::size_t full = up_len + L - 1;
    std::vector<double> y(full, 0.0);
    for (std::size_t i = 0; i < half; ++i)
        for (std::size_t k = 0; k < L; ++k) {
            y[2 * i + k] += fb.rec_lo[k] * a[i] + fb.rec_hi[k] * d[i];
        }
    std::size_t expect = (out_len + L - 1) / 2;
    if (half != expect)
        throw std::runtime_error("reconstruction error: inconsistent coefficient lengths");
    std::vector<double> out(out_len);
    for (std::size_t j = 0; j < out_len; ++j) out[j] = y[j + L - 2];
    return out;
}

}  // namespace detail

inline Decomposition dwt(const std::vector<double>& signal, std::size_t levels,
                         const FilterBank& fb, Padding padding) {
    constexpr std::size_t L = FilterBank::length;
    if (signal.size() < L)
        throw std::invalid_argument("decomposition error: signal length " +
                                    std::to_string(signal.size()) + " is below filter length 8");
    if (levels < 1) throw std::invalid_argument("decomposition error: levels must be >= 1");
    Decomposition out;
    out.levels = levels;
    out.original_length = signal.size();
    out.padding = padding;
    std::vector<double> cur = signal;
    std::vector<std::vector<double>> details_fine_first;
    for (std::size_t lv = 0; lv < levels; ++lv) {
        if (cur.size() < L)
            throw std::invalid_argument("decomposition error: level " + std::to_string(lv + 1) +
                                        " infeasible for signal length " +
                                        std::to_string(signal.size()));
        out.level_lengths.push_back(cur.size());
        std::vector<double> a, d;
        detail::dwt_step(cur, fb, padding, a, d);
        details_fine_first.push_back(std::move(d));
        cur = std::move(a);
    }
    out.approximation = std::move(cur);
    out.details.assign(details_fine_first.rbegin(), details_fine_first.rend());
    return out;
}

inline std::vector<double> idwt(const Decomposition& decomp, const FilterBank& fb) {
    if (decomp.details.size() != decomp.levels || decomp.level_lengths.size() != decomp.levels)
        throw std::runtime_error("reconstruction error: decomposition is internally inconsistent");
    std::vector<double> cur = decomp.approximation;
    for (std::size_t lv = 0; lv < decomp.levels; ++lv) {
        // details are stored finest-last; reconstruct deepest first
        const auto& d = decomp.details[lv];
        std::size_t out_len = decomp.level_lengths[decomp.levels - 1 - lv];
        cur = detail::idwt_step(cur, d, fb, decomp.padding, out_len);
    }
    return cur;
}

// robust noise scale from the finest detail coefficients: MAD / 0.6745
inline double estimate_sigma(const std::vector<double>& finest_details) {
    if (finest_details.empty())
        throw std::invalid_argument("estimate_sigma: empty coefficient array");
    std::vector<double> mag(finest_details.size());
    std::transform(finest_details.begin(), finest_details.end(), mag.begin(),
                   [](double c) { return std::fabs(c); });
    std::sort(mag.begin(), mag.end());
    std::size_t n = mag.size();
    double median = (n % 2 == 1) ? mag[n / 2] : 0.5 * (mag[n / 2 - 1] + mag[n / 2]);
    return median / 0.6745;
}

inline std::vector<double> soft_threshold(const std::vector<double>& coefficients,
                                          double threshold) {
    if (threshold < 0.0) throw std::invalid_argument("soft_threshold: negative threshold");
    std::vector<double> out(coefficients.size());
    for (std::size_t i = 0; i < coefficients.size(); ++i) {
        double c = coefficients[i];
        double m = std::fabs(c) - threshold;
        out[i] = m > 0.0 ? (c > 0.0 ? m : -m) : 0.0;
    }
    return out;
}

struct ThresholdPlan {
    double sigma = 0.0;
    double threshold = 0.0;
    std::set<std::size_t> zeroed_levels;  // 1 = finest
};

struct DenoiseConfig {
    std::size_t levels = 4;
    Padding padding = Padding::symmetric;
    std::set<std::size_t> zeroed_levels = {1};  // 1 = finest detail level
};

struct DenoiseResult {
    std::vector<double> denoised;
    std::vector<double> noise;  // signal - denoised, exactly
    ThresholdPlan plan;
};

// Pad-decompose-threshold-reconstruct pipeline. Detail levels listed in
// zeroed_levels are dropped entirely; the remaining levels are soft
// thresholded at the universal threshold sigma * sqrt(2 ln N).
inline DenoiseResult denoise(const std::vector<double>& signal, const DenoiseConfig& config,
                             const FilterBank& fb = FilterBank::db4()) {
    for (auto lv : config.zeroed_levels)
        if (lv < 1 || lv > config.levels)
            throw std::invalid_argument("denoise: zeroed level " + std::to_string(lv) +
                                        " outside 1.." + std::to_string(config.levels));
    Decomposition decomp = dwt(signal, config.levels, fb, config.padding);
    DenoiseResult res;
    res.plan.sigma = estimate_sigma(decomp.details.back());
    res.plan.threshold =
        res.plan.sigma * std::sqrt(2.0 * std::log(static_cast<double>(signal.size())));
    res.plan.zeroed_levels = config.zeroed_levels;
    for (std::size_t i = 0; i < decomp.details.size(); ++i) {
        std::size_t level = decomp.levels - i;  // finest-last storage -> level number
        if (config.zeroed_levels.count(level)) {
            std::fill(decomp.details[i].begin(), decomp.details[i].end(), 0.0);
        } else {
            decomp.details[i] = soft_threshold(decomp.details[i], res.plan.threshold);
        }
    }
    res.denoised = idwt(decomp, fb);
    res.noise.resize(signal.size());
    for (std::size_t i = 0; i < signal.size(); ++i) res.noise[i] = signal[i] - res.denoised[i];
    return res;
}

}  // namespace trendlab::wav
