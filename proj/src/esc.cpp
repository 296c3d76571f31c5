#include "quantcal/esc.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "quantcal/calib.hpp"

namespace quantcal {

const char* error_metric_name(ErrorMetric m) {
    switch (m) {
        case ErrorMetric::MseVsTarget: return "mse_vs_target";
        case ErrorMetric::MseVsFp32Output: return "mse_vs_fp32";
        case ErrorMetric::ClassificationError: return "classification_error";
    }
    return "?";
}

ErrorMetric error_metric_from_string(const std::string& s) {
    if (s == "mse_vs_target") return ErrorMetric::MseVsTarget;
    if (s == "mse_vs_fp32") return ErrorMetric::MseVsFp32Output;
    if (s == "classification_error") return ErrorMetric::ClassificationError;
    throw std::invalid_argument("unknown metric \"" + s +
                                "\" (expected mse_vs_target, mse_vs_fp32 or "
                                "classification_error)");
}

namespace {

bool metric_needs_targets(ErrorMetric m) {
    return m != ErrorMetric::MseVsFp32Output;
}

std::size_t argmax(const Tensor& t) {
    return static_cast<std::size_t>(
        std::max_element(t.values().begin(), t.values().end()) -
        t.values().begin());
}

void check_eval_set(const CalibrationSet& set, ErrorMetric metric) {
    if (set.inputs.empty())
        throw std::invalid_argument("evaluation set is empty");
    if (metric_needs_targets(metric) && set.targets.size() != set.inputs.size())
        throw std::invalid_argument(std::string(error_metric_name(metric)) +
                                    " needs one target per input");
}

CalibrationSet head(const CalibrationSet& cal, int n) {
    if (n <= 0)
        throw std::invalid_argument("sample count must be positive");
    const std::size_t take = std::min<std::size_t>(cal.inputs.size(),
                                                   static_cast<std::size_t>(n));
    CalibrationSet sub;
    sub.inputs.assign(cal.inputs.begin(), cal.inputs.begin() + take);
    if (!cal.targets.empty())
        sub.targets.assign(cal.targets.begin(), cal.targets.begin() + take);
    return sub;
}

// Per quantized slot, the input tensor each calibration sample feeds it.
std::vector<std::vector<Tensor>> per_slot_inputs(const ModelGraph& g,
                                                 const CalibrationSet& cal) {
    std::vector<std::vector<Tensor>> acts(g.num_quantized());
    for (const Tensor& x : cal.inputs) {
        ForwardResult r = g.forward_fp(x);
        for (std::size_t i = 0; i < r.activations.size(); ++i)
            acts[i].push_back(std::move(r.activations[i]));
    }
    return acts;
}

} // namespace

double evaluate(const ModelGraph& g, const ScaleVector& s,
                const CalibrationSet& eval_set, ErrorMetric metric,
                const QuantConfig& qc) {
    check_eval_set(eval_set, metric);
    double sum = 0.0;
    for (std::size_t i = 0; i < eval_set.inputs.size(); ++i) {
        const Tensor out = g.forward_quant(eval_set.inputs[i], s, qc);
        switch (metric) {
            case ErrorMetric::MseVsTarget:
                sum += mse(out, eval_set.targets[i]);
                break;
            case ErrorMetric::MseVsFp32Output:
                sum += mse(out, g.forward_fp(eval_set.inputs[i]).output);
                break;
            case ErrorMetric::ClassificationError:
                if (out.size() != eval_set.targets[i].size())
                    throw std::invalid_argument(
                        "output and target class counts differ");
                sum += argmax(out) != argmax(eval_set.targets[i]) ? 1.0 : 0.0;
                break;
        }
    }
    return sum / static_cast<double>(eval_set.inputs.size());
}

ScaleVector init_scales_mse(const ModelGraph& g, const CalibrationSet& cal,
                            int act_bits, int grid,
                            std::vector<std::string>* warnings) {
    if (cal.inputs.empty())
        throw std::invalid_argument("calibration set is empty");
    const std::vector<std::vector<Tensor>> acts = per_slot_inputs(g, cal);
    ScaleVector s;
    s.bits = act_bits;
    for (std::size_t slot = 0; slot < acts.size(); ++slot) {
        const LayerSpec& l = g.layers()[g.quantized_indices()[slot]];
        const std::vector<Tensor>& obs = acts[slot];
        double beta = 1e-8;
        double abs_max = 0.0;
        for (const Tensor& a : obs)
            abs_max = std::max(abs_max, reduce_abs_max(a));
        if (abs_max == 0.0) {
            if (warnings)
                warnings->push_back("layer " + l.name +
                                    ": all-zero observed inputs, using fallback "
                                    "range 1e-8");
        } else {
            std::vector<Tensor> fp_out;
            fp_out.reserve(obs.size());
            for (const Tensor& a : obs)
                fp_out.push_back(layer_forward(l, a));
            beta = mse_grid_search(abs_max, grid, [&](double cand) {
                const QuantParams p = scale_from_range(cand, act_bits);
                double cost = 0.0;
                for (std::size_t i = 0; i < obs.size(); ++i)
                    cost += mse(layer_forward(l, fake_quantize(obs[i], p)),
                                fp_out[i]);
                return cost / static_cast<double>(obs.size());
            });
        }
        s.scales.push_back(scale_from_range(beta, act_bits).scale);
    }
    return s;
}

EscResult esc_calibrate(const ModelGraph& g, const CalibrationSet& cal,
                        const EscConfig& cfg) {
    const CalibrationSet sub = head(cal, cfg.n);
    check_eval_set(sub, cfg.metric);

    EscResult res;
    res.init_scales = init_scales_mse(g, sub, cfg.act_bits, cfg.grid,
                                      &res.warnings);
    QuantConfig qc = make_quant_config(g, cfg.weight_bits, cfg.act_bits);
    res.warnings.insert(res.warnings.end(), qc.warnings.begin(),
                        qc.warnings.end());
    res.init_error = evaluate(g, res.init_scales, sub, cfg.metric, qc);

    const std::size_t dim = g.num_quantized();
    const int lambda = cfg.lambda > 0 ? cfg.lambda
                                      : cma_default_lambda(dim);
    auto to_scales = [&](const std::vector<double>& mult) {
        ScaleVector sv;
        sv.bits = cfg.act_bits;
        sv.scales.reserve(dim);
        for (std::size_t i = 0; i < dim; ++i)
            sv.scales.push_back(std::max(mult[i], 1e-6) *
                                res.init_scales.scales[i]);
        return sv;
    };

    if (cfg.budget < lambda) {
        res.stage2_skipped = true;
        res.warnings.push_back(
            "refinement skipped: budget " + std::to_string(cfg.budget) +
            " is smaller than the population size " + std::to_string(lambda));
        res.final_scales = res.init_scales;
        res.final_error = evaluate(g, res.final_scales, sub, cfg.metric, qc);
        res.best_seen_error = res.final_error;
        return res;
    }

    const CmaResult r = cma_optimize(
        [&](const std::vector<double>& mult) {
            return evaluate(g, to_scales(mult), sub, cfg.metric, qc);
        },
        std::vector<double>(dim, 1.0), cfg.sigma0, cfg.budget, cfg.seed,
        cfg.lambda);
    res.final_scales = to_scales(r.mean);
    res.final_error = evaluate(g, res.final_scales, sub, cfg.metric, qc);
    res.best_seen_error = r.best_f;
    res.trace = r.trace;
    return res;
}

BaselineResult run_baseline(const ModelGraph& g, const CalibrationSet& cal,
                            const BaselineMethod& method, const EscConfig& cfg) {
    const CalibrationSet sub = head(cal, cfg.n);
    check_eval_set(sub, cfg.metric);
    const std::vector<std::vector<Tensor>> acts = per_slot_inputs(g, sub);

    BaselineResult res;
    res.scales.bits = cfg.act_bits;
    for (std::size_t slot = 0; slot < acts.size(); ++slot) {
        const LayerSpec& l = g.layers()[g.quantized_indices()[slot]];
        const std::vector<Tensor>& obs = acts[slot];
        std::uint64_t count = 0;
        for (const Tensor& a : obs)
            count += a.size();
        double beta = 0.0;
        try {
            const double abs_max = calibrate_max(obs);
            switch (method.kind) {
                case BaselineMethod::Max:
                    beta = abs_max;
                    break;
                case BaselineMethod::Percentile:
                    if (count <= 1000000) {
                        beta = percentile_exact(obs, method.percentile);
                    } else {
                        beta = calibrate_percentile(Histogram::from_tensors(obs),
                                                    method.percentile);
                    }
                    break;
                case BaselineMethod::Entropy:
                    beta = calibrate_entropy(Histogram::from_tensors(obs),
                                             cfg.act_bits);
                    break;
                case BaselineMethod::Mse:
                    beta = calibrate_mse_range(obs, cfg.act_bits, cfg.grid);
                    break;
            }
        } catch (const DegenerateRangeError&) {
            beta = 0.0;
        }
        if (!(beta > 0.0)) {
            beta = 1e-8;
            res.warnings.push_back("layer " + l.name +
                                   ": calibrated range is zero, using fallback "
                                   "range 1e-8");
        }
        res.scales.scales.push_back(scale_from_range(beta, cfg.act_bits).scale);
    }

    QuantConfig qc = make_quant_config(g, cfg.weight_bits, cfg.act_bits);
    res.warnings.insert(res.warnings.end(), qc.warnings.begin(),
                        qc.warnings.end());
    res.cal_error = evaluate(g, res.scales, sub, cfg.metric, qc);
    return res;
}

} // namespace quantcal
