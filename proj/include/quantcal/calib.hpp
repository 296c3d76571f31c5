#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "quantcal/tensor.hpp"

namespace quantcal {

// Raised when a calibrator sees only zeros and no meaningful range exists.
// The pipeline catches this and assigns a fixed tiny range instead.
struct DegenerateRangeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Histogram over absolute values. The bin width grows on demand: when a value
// falls past the top edge, the width doubles and adjacent bins merge pairwise.
class Histogram {
public:
    explicit Histogram(std::size_t num_bins = 2048);

    void observe(const Tensor& t);

    // Order-independent construction: one pass to find the abs max (which fixes
    // the bin width), one pass to fill.
    static Histogram from_tensors(const std::vector<Tensor>& tensors,
                                  std::size_t num_bins = 2048);

    std::size_t num_bins() const { return counts_.size(); }
    double bin_width() const { return bin_width_; }
    const std::vector<std::uint64_t>& counts() const { return counts_; }
    double observed_abs_max() const { return abs_max_; }
    std::uint64_t total() const { return total_; }

private:
    void observe_value(double v);

    std::vector<std::uint64_t> counts_;
    double bin_width_ = 0.0;
    double abs_max_ = 0.0;
    std::uint64_t total_ = 0;
};

// Largest absolute value across all tensors.
double calibrate_max(const std::vector<Tensor>& tensors);

// Upper edge of the first bin whose cumulative count reaches percentile% of
// the total. percentile in (0, 100].
double calibrate_percentile(const Histogram& h, double percentile);

// Exact sorted percentile over raw magnitudes; the pipeline prefers this path
// while the observation count stays small enough to hold in memory.
double percentile_exact(const std::vector<Tensor>& tensors, double percentile);

// KL-divergence clip search: for each candidate clip c (in bins), the clipped
// distribution folds outliers into its last bin and is compared against itself
// requantized to 2^(bits-1) levels. Exhaustive over c; ties take the smallest
// clip. Falls back to the observed abs max when the histogram has fewer bins
// than quantization levels.
double calibrate_entropy(const Histogram& h, int bits);

// Minimizes cost over the candidate grid {k/grid * abs_max : k = 1..grid};
// ties take the smaller candidate.
double mse_grid_search(double abs_max, int grid,
                       const std::function<double(double)>& cost);

// Range that minimizes the summed squared fake-quantization error of the
// observations themselves.
double calibrate_mse_range(const std::vector<Tensor>& tensors, int bits,
                           int grid = 100);

struct CalibrationSet {
    std::vector<Tensor> inputs;
    std::vector<Tensor> targets; // may be empty when a metric does not need them
    std::size_t size() const { return inputs.size(); }
};

} // namespace quantcal
