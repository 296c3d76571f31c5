#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace quantcal {

int cma_default_lambda(int dim);

// One generation record for diagnostics. best_f is the best fitness seen so
// far (non-increasing across generations), mean_f the population mean.
struct TracePoint {
    int t = 0;
    long long evals = 0;
    double sigma = 0.0;
    double best_f = 0.0;
    double mean_f = 0.0;
};

std::string trace_to_jsonl(const std::vector<TracePoint>& trace);

// Ask/tell CMA-ES state (weighted recombination, CSA step-size control,
// rank-one plus rank-mu covariance update). Sampling is a pure function of
// (seed, generation), so repeated ask() calls on the same state coincide.
class CmaState {
public:
    CmaState(std::vector<double> mean0, double sigma0, std::uint64_t seed,
             int lambda = 0);
    ~CmaState();
    CmaState(CmaState&&) noexcept;
    CmaState& operator=(CmaState&&) noexcept;
    CmaState(const CmaState&) = delete;
    CmaState& operator=(const CmaState&) = delete;

    int dim() const;
    int lambda() const;
    int generation() const;
    long long evals() const;
    double sigma() const;
    std::vector<double> mean() const;
    std::vector<std::vector<double>> covariance() const;

    std::vector<std::vector<double>> ask() const;
    void tell(const std::vector<std::vector<double>>& candidates,
              const std::vector<double>& fitness);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct CmaResult {
    std::vector<double> mean;      // mean of the final sampling distribution
    std::vector<double> best_x;    // best evaluated candidate, for diagnostics
    double best_f = 0.0;
    long long evals = 0;
    std::vector<TracePoint> trace;
    // (evals, best-so-far) after each generation; best_f is non-increasing.
    std::vector<std::pair<long long, double>> history;
};

// Runs full generations until at least max_evals objective calls were spent
// (never more than max_evals + lambda - 1). Non-finite fitness values are
// replaced by the worst finite fitness of the generation plus ten times the
// generation's fitness spread. Candidate evaluations within one generation may
// run in parallel (capped by QUANTCAL_THREADS). Returns the final mean, not
// the best candidate.
CmaResult cma_optimize(const std::function<double(const std::vector<double>&)>& objective,
                       std::vector<double> mean0, double sigma0,
                       long long max_evals, std::uint64_t seed, int lambda = 0);

} // namespace quantcal
