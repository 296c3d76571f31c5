#include "quantcal/calib.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "quantcal/quant.hpp"

namespace quantcal {

Histogram::Histogram(std::size_t num_bins) {
    if (num_bins < 2)
        throw std::invalid_argument("histogram needs at least 2 bins");
    counts_.assign(num_bins, 0);
}

void Histogram::observe_value(double v) {
    double a = std::fabs(v);
    abs_max_ = std::max(abs_max_, a);
    ++total_;
    const std::size_t n = counts_.size();
    if (bin_width_ == 0.0) {
        if (a == 0.0) {
            ++counts_[0];
            return;
        }
        bin_width_ = a / static_cast<double>(n);
    }
    // grow by doubling until the value fits, merging counts pairwise
    while (a > bin_width_ * static_cast<double>(n)) {
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t merged = 0;
            if (2 * i < n) merged += counts_[2 * i];
            if (2 * i + 1 < n) merged += counts_[2 * i + 1];
            counts_[i] = merged;
        }
        bin_width_ *= 2.0;
    }
    std::size_t idx = static_cast<std::size_t>(a / bin_width_);
    if (idx >= n) idx = n - 1;
    ++counts_[idx];
}

void Histogram::observe(const Tensor& t) {
    for (double v : t.values())
        observe_value(v);
}

Histogram Histogram::from_tensors(const std::vector<Tensor>& tensors,
                                  std::size_t num_bins) {
    Histogram h(num_bins);
    double m = 0.0;
    for (const Tensor& t : tensors)
        m = std::max(m, reduce_abs_max(t));
    if (m > 0.0)
        h.bin_width_ = m / static_cast<double>(num_bins);
    for (const Tensor& t : tensors)
        h.observe(t);
    return h;
}

double calibrate_max(const std::vector<Tensor>& tensors) {
    if (tensors.empty())
        throw std::invalid_argument("calibrate_max needs at least one tensor");
    double m = 0.0;
    for (const Tensor& t : tensors)
        m = std::max(m, reduce_abs_max(t));
    if (m == 0.0)
        throw DegenerateRangeError("all observed values are zero");
    return m;
}

double calibrate_percentile(const Histogram& h, double percentile) {
    if (!(percentile > 0.0) || percentile > 100.0)
        throw std::invalid_argument("percentile must be in (0, 100], got " +
                                    std::to_string(percentile));
    if (h.total() == 0)
        throw std::invalid_argument("calibrate_percentile on an empty histogram");
    if (h.observed_abs_max() == 0.0)
        throw DegenerateRangeError("all observed values are zero");
    const double target = percentile / 100.0 * static_cast<double>(h.total());
    std::uint64_t cum = 0;
    for (std::size_t b = 0; b < h.num_bins(); ++b) {
        cum += h.counts()[b];
        if (static_cast<double>(cum) >= target)
            return static_cast<double>(b + 1) * h.bin_width();
    }
    return static_cast<double>(h.num_bins()) * h.bin_width();
}

double percentile_exact(const std::vector<Tensor>& tensors, double percentile) {
    if (!(percentile > 0.0) || percentile > 100.0)
        throw std::invalid_argument("percentile must be in (0, 100], got " +
                                    std::to_string(percentile));
    std::vector<double> mags;
    for (const Tensor& t : tensors)
        for (double v : t.values())
            mags.push_back(std::fabs(v));
    if (mags.empty())
        throw std::invalid_argument("percentile_exact needs observations");
    std::sort(mags.begin(), mags.end());
    if (mags.back() == 0.0)
        throw DegenerateRangeError("all observed values are zero");
    // smallest magnitude whose rank covers percentile% of the observations
    std::size_t n = mags.size();
    std::size_t rank = static_cast<std::size_t>(
        std::ceil(percentile / 100.0 * static_cast<double>(n)));
    rank = std::clamp<std::size_t>(rank, 1, n);
    return mags[rank - 1];
}

namespace {

// KL(P || Q) for clip candidate c. P is the observed distribution with the
// tail mass beyond c folded into bin c-1; Q is the clipped distribution
// (tail discarded) requantized to `levels` groups, each group's mass spread
// uniformly over its occupied bins. Both are normalized over their own mass.
// Folding only P gives every clip that discards mass a strictly positive
// divergence, so an exactly-representable distribution is preferred at the
// widest clip that still covers it. Returns +inf when P has mass in a bin
// Q cannot represent (unusable clip).
double clip_kl(const std::vector<std::uint64_t>& counts, std::size_t c,
               std::size_t levels, double total) {
    std::vector<double> p(c);
    for (std::size_t i = 0; i < c; ++i)
        p[i] = static_cast<double>(counts[i]);
    for (std::size_t i = c; i < counts.size(); ++i)
        p[c - 1] += static_cast<double>(counts[i]);

    std::vector<double> q(c, 0.0);
    double q_mass = 0.0;
    for (std::size_t l = 0; l < levels; ++l) {
        const std::size_t begin = l * c / levels;
        const std::size_t end = (l + 1) * c / levels;
        double mass = 0.0;
        std::size_t occupied = 0;
        for (std::size_t i = begin; i < end; ++i) {
            mass += static_cast<double>(counts[i]);
            if (counts[i] > 0) ++occupied;
        }
        q_mass += mass;
        if (occupied == 0) continue;
        const double share = mass / static_cast<double>(occupied);
        for (std::size_t i = begin; i < end; ++i)
            if (counts[i] > 0) q[i] = share;
    }

    double kl = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0)
            return std::numeric_limits<double>::infinity();
        kl += (p[i] / total) * std::log((p[i] / total) / (q[i] / q_mass));
    }
    return kl;
}

} // namespace

double calibrate_entropy(const Histogram& h, int bits) {
    if (bits < 2 || bits > 16)
        throw std::invalid_argument("bits must be in [2, 16], got " +
                                    std::to_string(bits));
    if (h.total() == 0)
        throw std::invalid_argument("calibrate_entropy on an empty histogram");
    if (h.observed_abs_max() == 0.0)
        throw DegenerateRangeError("all observed values are zero");
    const std::size_t levels = std::size_t(1) << (bits - 1);
    if (h.num_bins() < levels)
        return h.observed_abs_max(); // no candidate clips exist
    const double total = static_cast<double>(h.total());
    std::size_t best_c = levels;
    double best_kl = std::numeric_limits<double>::infinity();
    for (std::size_t c = levels; c <= h.num_bins(); ++c) {
        double kl = clip_kl(h.counts(), c, levels, total);
        if (kl < best_kl) {
            best_kl = kl;
            best_c = c;
        }
    }
    return static_cast<double>(best_c) * h.bin_width();
}

double mse_grid_search(double abs_max, int grid,
                       const std::function<double(double)>& cost) {
    if (grid < 1)
        throw std::invalid_argument("grid must be >= 1");
    if (!(abs_max > 0.0) || !std::isfinite(abs_max))
        throw std::invalid_argument("grid search needs a positive abs max");
    double best_beta = abs_max;
    double best_cost = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= grid; ++k) {
        const double beta = static_cast<double>(k) / grid * abs_max;
        const double c = cost(beta);
        if (c < best_cost) {
            best_cost = c;
            best_beta = beta;
        }
    }
    return best_beta;
}

double calibrate_mse_range(const std::vector<Tensor>& tensors, int bits, int grid) {
    if (tensors.empty())
        throw std::invalid_argument("calibrate_mse_range needs at least one tensor");
    double abs_max = 0.0;
    for (const Tensor& t : tensors)
        abs_max = std::max(abs_max, reduce_abs_max(t));
    if (abs_max == 0.0)
        throw DegenerateRangeError("all observed values are zero");
    return mse_grid_search(abs_max, grid, [&](double beta) {
        const QuantParams p = scale_from_range(beta, bits);
        double acc = 0.0;
        for (const Tensor& t : tensors) {
            for (double v : t.values()) {
                const double d = v - fake_quantize_value(v, p);
                acc += d * d;
            }
        }
        return acc;
    });
}

} // namespace quantcal
