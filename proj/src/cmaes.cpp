#include "quantcal/cmaes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <json.hpp>

#include "quantcal/parallel.hpp"

namespace quantcal {

int cma_default_lambda(int dim) {
    if (dim < 1)
        throw std::invalid_argument("dimension must be >= 1");
    return 4 + static_cast<int>(std::floor(3.0 * std::log(static_cast<double>(dim))));
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d4a2b594845629ULL;
    return x ^ (x >> 31);
}

std::string format_double(double v) {
    nlohmann::json j = v;
    return j.dump();
}

} // namespace

struct CmaState::Impl {
    int n = 0;
    int lambda = 0;
    int mu = 0;
    std::uint64_t seed = 0;
    int t = 0;
    long long evals = 0;

    Eigen::VectorXd mean;
    double sigma = 0.0;
    Eigen::MatrixXd C;
    Eigen::VectorXd ps, pc;
    Eigen::VectorXd weights;
    double mueff = 0, cs = 0, ds = 0, cc = 0, c1 = 0, cmu = 0, chiN = 0;

    // cached factorization C = B diag(d)^2 B^T, refreshed after every update
    Eigen::MatrixXd B;
    Eigen::VectorXd d;

    void factorize() {
        C = 0.5 * (C + C.transpose().eval());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(C);
        bool ok = solver.info() == Eigen::Success &&
                  solver.eigenvalues().minCoeff() > 0.0;
        if (!ok) {
            // A fully converged run keeps shrinking C multiplicatively until
            // its entries underflow, where a bump proportional to the trace
            // underflows too; escalate from a representable floor instead of
            // giving up.
            double base = C.trace() / n;
            if (!(base > 0.0) || !std::isfinite(base))
                base = 1.0;
            for (double eps = 1e-12; !ok && eps <= 1.0; eps *= 1e3) {
                C.diagonal().array() += std::max(base * eps, 1e-300);
                solver.compute(C);
                ok = solver.info() == Eigen::Success &&
                     solver.eigenvalues().minCoeff() > 0.0;
            }
        }
        if (!ok)
            throw std::runtime_error("covariance factorization failed after repair");
        B = solver.eigenvectors();
        d = solver.eigenvalues().cwiseSqrt();
    }
};

CmaState::CmaState(std::vector<double> mean0, double sigma0, std::uint64_t seed,
                   int lambda)
    : impl_(std::make_unique<Impl>()) {
    if (mean0.empty())
        throw std::invalid_argument("mean0 must be non-empty");
    if (!(sigma0 > 0.0) || !std::isfinite(sigma0))
        throw std::invalid_argument("sigma0 must be positive and finite");
    for (double v : mean0)
        if (!std::isfinite(v))
            throw std::invalid_argument("mean0 must be finite");
    Impl& s = *impl_;
    s.n = static_cast<int>(mean0.size());
    s.lambda = lambda > 0 ? lambda : cma_default_lambda(s.n);
    if (s.lambda < 2)
        throw std::invalid_argument("lambda must be >= 2");
    s.mu = s.lambda / 2;
    s.seed = seed;
    s.mean = Eigen::Map<Eigen::VectorXd>(mean0.data(), s.n);
    s.sigma = sigma0;
    s.C = Eigen::MatrixXd::Identity(s.n, s.n);
    s.ps = Eigen::VectorXd::Zero(s.n);
    s.pc = Eigen::VectorXd::Zero(s.n);

    s.weights = Eigen::VectorXd(s.mu);
    for (int i = 0; i < s.mu; ++i)
        s.weights[i] = std::log(s.mu + 0.5) - std::log(i + 1.0);
    s.weights /= s.weights.sum();
    s.mueff = 1.0 / s.weights.squaredNorm();

    const double n = s.n;
    s.cs = (s.mueff + 2.0) / (n + s.mueff + 5.0);
    s.ds = 1.0 + 2.0 * std::max(0.0, std::sqrt((s.mueff - 1.0) / (n + 1.0)) - 1.0) + s.cs;
    s.cc = (4.0 + s.mueff / n) / (n + 4.0 + 2.0 * s.mueff / n);
    s.c1 = 2.0 / ((n + 1.3) * (n + 1.3) + s.mueff);
    s.cmu = std::min(1.0 - s.c1, 2.0 * (s.mueff - 2.0 + 1.0 / s.mueff) /
                                     ((n + 2.0) * (n + 2.0) + s.mueff));
    s.chiN = std::sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
    s.factorize();
}

CmaState::~CmaState() = default;
CmaState::CmaState(CmaState&&) noexcept = default;
CmaState& CmaState::operator=(CmaState&&) noexcept = default;

int CmaState::dim() const { return impl_->n; }
int CmaState::lambda() const { return impl_->lambda; }
int CmaState::generation() const { return impl_->t; }
long long CmaState::evals() const { return impl_->evals; }
double CmaState::sigma() const { return impl_->sigma; }

std::vector<double> CmaState::mean() const {
    return {impl_->mean.data(), impl_->mean.data() + impl_->n};
}

std::vector<std::vector<double>> CmaState::covariance() const {
    const Impl& s = *impl_;
    std::vector<std::vector<double>> c(s.n, std::vector<double>(s.n));
    for (int i = 0; i < s.n; ++i)
        for (int j = 0; j < s.n; ++j)
            c[i][j] = s.C(i, j);
    return c;
}

std::vector<std::vector<double>> CmaState::ask() const {
    const Impl& s = *impl_;
    // generation-keyed rng: same state (and thus same t) -> same population
    std::mt19937_64 rng(splitmix64(s.seed ^ splitmix64(static_cast<std::uint64_t>(s.t) + 1)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<std::vector<double>> xs(s.lambda, std::vector<double>(s.n));
    for (int k = 0; k < s.lambda; ++k) {
        Eigen::VectorXd z(s.n);
        for (int i = 0; i < s.n; ++i)
            z[i] = gauss(rng);
        Eigen::VectorXd x = s.mean + s.sigma * (s.B * (s.d.asDiagonal() * z));
        for (int i = 0; i < s.n; ++i)
            xs[k][i] = x[i];
    }
    return xs;
}

void CmaState::tell(const std::vector<std::vector<double>>& candidates,
                    const std::vector<double>& fitness) {
    Impl& s = *impl_;
    if (candidates.size() != static_cast<std::size_t>(s.lambda) ||
        fitness.size() != static_cast<std::size_t>(s.lambda))
        throw std::invalid_argument("tell needs exactly lambda candidates and fitnesses");
    for (const auto& x : candidates)
        if (x.size() != static_cast<std::size_t>(s.n))
            throw std::invalid_argument("candidate dimension mismatch");
    for (double f : fitness)
        if (std::isnan(f))
            throw std::invalid_argument("fitness must not be NaN");

    std::vector<int> order(s.lambda);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return fitness[a] < fitness[b]; });

    const Eigen::VectorXd old_mean = s.mean;
    std::vector<Eigen::VectorXd> y(s.mu);
    Eigen::VectorXd yw = Eigen::VectorXd::Zero(s.n);
    for (int r = 0; r < s.mu; ++r) {
        const auto& x = candidates[order[r]];
        Eigen::VectorXd xv = Eigen::Map<const Eigen::VectorXd>(x.data(), s.n);
        y[r] = (xv - old_mean) / s.sigma;
        yw += s.weights[r] * y[r];
    }
    s.mean = old_mean + s.sigma * yw;

    // CSA path uses C^(-1/2) y_w from the cached factorization
    Eigen::VectorXd cinv_yw = s.B * s.d.cwiseInverse().asDiagonal() * (s.B.transpose() * yw);
    s.ps = (1.0 - s.cs) * s.ps + std::sqrt(s.cs * (2.0 - s.cs) * s.mueff) * cinv_yw;

    s.t += 1;
    s.evals += s.lambda;

    const double ps_norm = s.ps.norm();
    const double denom = std::sqrt(1.0 - std::pow(1.0 - s.cs, 2.0 * s.t));
    const bool hsig = ps_norm / denom < (1.4 + 2.0 / (s.n + 1.0)) * s.chiN;

    s.pc = (1.0 - s.cc) * s.pc +
           (hsig ? std::sqrt(s.cc * (2.0 - s.cc) * s.mueff) : 0.0) * yw;

    Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(s.n, s.n);
    for (int r = 0; r < s.mu; ++r)
        rank_mu += s.weights[r] * (y[r] * y[r].transpose());
    const double hsig_fix = (1.0 - (hsig ? 1.0 : 0.0)) * s.cc * (2.0 - s.cc);
    s.C = (1.0 - s.c1 - s.cmu) * s.C +
          s.c1 * (s.pc * s.pc.transpose() + hsig_fix * s.C) +
          s.cmu * rank_mu;

    s.sigma *= std::exp((s.cs / s.ds) * (ps_norm / s.chiN - 1.0));
    if (!std::isfinite(s.sigma) || s.sigma <= 0.0)
        throw std::runtime_error("step size became invalid");

    s.factorize();
}

std::string trace_to_jsonl(const std::vector<TracePoint>& trace) {
    std::ostringstream out;
    for (const TracePoint& p : trace) {
        out << "{\"t\":" << p.t << ",\"evals\":" << p.evals
            << ",\"sigma\":" << format_double(p.sigma)
            << ",\"best_f\":" << format_double(p.best_f)
            << ",\"mean_f\":" << format_double(p.mean_f) << "}\n";
    }
    return out.str();
}

CmaResult cma_optimize(const std::function<double(const std::vector<double>&)>& objective,
                       std::vector<double> mean0, double sigma0,
                       long long max_evals, std::uint64_t seed, int lambda) {
    CmaState state(std::move(mean0), sigma0, seed, lambda);
    if (max_evals < state.lambda())
        throw std::invalid_argument("budget smaller than the population size");

    CmaResult res;
    res.best_f = std::numeric_limits<double>::infinity();
    while (state.evals() < max_evals) {
        const auto xs = state.ask();
        std::vector<double> fs(xs.size());
        parallel_for(xs.size(), [&](std::size_t i) { fs[i] = objective(xs[i]); });

        double worst = -std::numeric_limits<double>::infinity();
        double best = std::numeric_limits<double>::infinity();
        std::size_t finite = 0;
        for (double f : fs) {
            if (std::isfinite(f)) {
                worst = std::max(worst, f);
                best = std::min(best, f);
                ++finite;
            }
        }
        if (finite == 0)
            throw std::runtime_error("all candidate fitnesses were non-finite");
        const double penalty = worst + 10.0 * (worst - best);
        double mean_f = 0.0;
        for (std::size_t i = 0; i < fs.size(); ++i) {
            if (!std::isfinite(fs[i]))
                fs[i] = penalty;
            mean_f += fs[i];
        }
        mean_f /= static_cast<double>(fs.size());

        for (std::size_t i = 0; i < fs.size(); ++i) {
            if (fs[i] < res.best_f) {
                res.best_f = fs[i];
                res.best_x = xs[i];
            }
        }
        state.tell(xs, fs);
        res.trace.push_back({state.generation(), state.evals(), state.sigma(),
                             res.best_f, mean_f});
        res.history.emplace_back(state.evals(), res.best_f);
    }
    res.mean = state.mean();
    res.evals = state.evals();
    return res;
}

} // namespace quantcal
