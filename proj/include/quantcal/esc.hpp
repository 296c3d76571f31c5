#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "quantcal/cmaes.hpp"
#include "quantcal/model.hpp"

namespace quantcal {

enum class ErrorMetric { MseVsTarget, MseVsFp32Output, ClassificationError };

const char* error_metric_name(ErrorMetric m);
ErrorMetric error_metric_from_string(const std::string& s);

struct EscConfig {
    int act_bits = 8;
    int weight_bits = 8;
    double sigma0 = 0.1;
    long long budget = 100; // objective evaluations for stage 2
    int n = 100;            // calibration samples used
    std::uint64_t seed = 0;
    ErrorMetric metric = ErrorMetric::MseVsTarget;
    int lambda = 0;         // 0 = 4 + floor(3 ln N)
    int grid = 100;         // stage-1 range-search grid
};

struct EscResult {
    ScaleVector init_scales;
    ScaleVector final_scales;
    double init_error = 0.0;
    double final_error = 0.0;
    bool stage2_skipped = false;
    double best_seen_error = 0.0; // best candidate objective seen in stage 2
    std::vector<TracePoint> trace;
    std::vector<std::string> warnings;
};

// Mean task error of the fake-quantized model over eval_set.
// MseVsTarget compares against targets, MseVsFp32Output against the
// full-precision forward pass, ClassificationError is the argmax mismatch
// fraction (ties resolve to the lowest class index).
double evaluate(const ModelGraph& g, const ScaleVector& s,
                const CalibrationSet& eval_set, ErrorMetric metric,
                const QuantConfig& qc);

// Stage 1: per-layer range search minimizing the layer-output MSE between the
// layer applied to the raw input and to its fake-quantized input. Layers with
// all-zero observed inputs fall back to beta = 1e-8 (with a warning).
ScaleVector init_scales_mse(const ModelGraph& g, const CalibrationSet& cal,
                            int act_bits, int grid = 100,
                            std::vector<std::string>* warnings = nullptr);

// Stage 1 + stage 2: CMA-ES over per-layer scale multipliers (mean starts at
// all-ones), objective = evaluate() on the calibration set, multipliers
// clamped to at least 1e-6. Stage 2 is skipped with a warning when the budget
// is smaller than the population size. The returned final_error always equals
// evaluate() at final_scales.
EscResult esc_calibrate(const ModelGraph& g, const CalibrationSet& cal,
                        const EscConfig& cfg);

struct BaselineMethod {
    enum Kind { Max, Percentile, Entropy, Mse } kind = Max;
    double percentile = 99.99;
};

struct BaselineResult {
    ScaleVector scales;
    double cal_error = 0.0;
    std::vector<std::string> warnings;
};

// One-shot calibration of every quantized layer with a single method, plus
// the calibration-set error of the result.
BaselineResult run_baseline(const ModelGraph& g, const CalibrationSet& cal,
                            const BaselineMethod& method, const EscConfig& cfg);

} // namespace quantcal
