#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "quantcal/calib.hpp"
#include "quantcal/esc.hpp"
#include "quantcal/model.hpp"
#include "quantcal/quant.hpp"
#include "quantcal/synth.hpp"
#include "quantcal/tensor.hpp"

using namespace quantcal;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "quantcal_esc_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

LayerSpec linear(const std::string& name, std::size_t out, std::size_t in,
                 std::vector<double> w, std::vector<double> b) {
    LayerSpec l;
    l.kind = LayerKind::Linear;
    l.name = name;
    l.weight = Tensor({out, in}, std::move(w));
    l.bias = Tensor({out}, std::move(b));
    return l;
}

LayerSpec random_linear(const std::string& name, std::size_t out,
                        std::size_t in, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 0.5);
    std::vector<double> w(out * in), b(out);
    for (double& v : w)
        v = gauss(rng);
    for (double& v : b)
        v = gauss(rng);
    return linear(name, out, in, std::move(w), std::move(b));
}

LayerSpec act(LayerKind kind, const std::string& name) {
    LayerSpec l;
    l.kind = kind;
    l.name = name;
    return l;
}

ModelGraph two_layer_model(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<LayerSpec> layers;
    layers.push_back(random_linear("fc1", 5, 3, rng));
    layers.push_back(act(LayerKind::GELU, "gelu"));
    layers.push_back(random_linear("fc2", 2, 5, rng));
    return ModelGraph::build({3}, layers);
}

CalibrationSet random_cal(std::uint64_t seed, std::size_t n, std::size_t in,
                          std::size_t out) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    CalibrationSet cal;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> xv(in), tv(out);
        for (double& v : xv)
            v = gauss(rng);
        for (double& v : tv)
            v = gauss(rng);
        cal.inputs.push_back(Tensor({in}, xv));
        cal.targets.push_back(Tensor({out}, tv));
    }
    return cal;
}

ScaleVector max_scales(const ModelGraph& g, const CalibrationSet& cal, int bits) {
    ScaleVector s;
    s.bits = bits;
    for (const Tensor& a : collect_activations(g, cal))
        s.scales.push_back(scale_from_range(reduce_abs_max(a), bits).scale);
    return s;
}

// independent exhaustive re-implementation of the per-layer range search
double oracle_layer_beta(const LayerSpec& l, const std::vector<Tensor>& obs,
                         int bits, int grid) {
    double abs_max = 0.0;
    for (const Tensor& a : obs)
        abs_max = std::max(abs_max, reduce_abs_max(a));
    REQUIRE(abs_max > 0.0);
    double best_beta = abs_max;
    double best_cost = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= grid; ++k) {
        const double beta = static_cast<double>(k) / grid * abs_max;
        const QuantParams p = scale_from_range(beta, bits);
        double cost = 0.0;
        for (const Tensor& a : obs)
            cost += mse(layer_forward(l, fake_quantize(a, p)),
                        layer_forward(l, a));
        cost /= static_cast<double>(obs.size());
        if (cost < best_cost) {
            best_cost = cost;
            best_beta = beta;
        }
    }
    return best_beta;
}

} // namespace

TEST_CASE("error metric names round trip") {
    for (ErrorMetric m : {ErrorMetric::MseVsTarget, ErrorMetric::MseVsFp32Output,
                          ErrorMetric::ClassificationError})
        CHECK(error_metric_from_string(error_metric_name(m)) == m);
    CHECK_THROWS_AS(error_metric_from_string("accuracy"), std::invalid_argument);
}

TEST_CASE("evaluate at 16 bits is close to the float forward pass") {
    const ModelGraph g = two_layer_model(11);
    CalibrationSet cal = random_cal(12, 8, 3, 2);
    const ScaleVector s = max_scales(g, cal, 16);
    const QuantConfig qc = make_quant_config(g, 16, 16);
    const double err = evaluate(g, s, cal, ErrorMetric::MseVsFp32Output, qc);
    CHECK(err >= 0.0);
    CHECK(err < 1e-6);
}

TEST_CASE("evaluate validates its evaluation set") {
    const ModelGraph g = two_layer_model(13);
    const ScaleVector s = max_scales(g, random_cal(14, 4, 3, 2), 8);
    const QuantConfig qc = make_quant_config(g, 8, 8);

    CalibrationSet empty;
    CHECK_THROWS_AS(evaluate(g, s, empty, ErrorMetric::MseVsFp32Output, qc),
                    std::invalid_argument);

    CalibrationSet no_targets;
    no_targets.inputs.push_back(Tensor({3}, {1.0, 2.0, 3.0}));
    CHECK_THROWS_AS(evaluate(g, s, no_targets, ErrorMetric::MseVsTarget, qc),
                    std::invalid_argument);
    // the fp32 metric does not need targets
    CHECK_NOTHROW(evaluate(g, s, no_targets, ErrorMetric::MseVsFp32Output, qc));
}

TEST_CASE("classification ties resolve to the lowest class index") {
    // zero weights: the output is always the bias (1, 1, 0), a tie between
    // classes 0 and 1 that must resolve to class 0
    std::vector<LayerSpec> layers;
    layers.push_back(linear("fc", 3, 2, {0, 0, 0, 0, 0, 0}, {1.0, 1.0, 0.0}));
    const ModelGraph g = ModelGraph::build({2}, layers);
    const QuantConfig qc = make_quant_config(g, 8, 8);
    ScaleVector s;
    s.bits = 8;
    s.scales = {1.0};

    CalibrationSet matches;
    matches.inputs.push_back(Tensor({2}, {0.3, -0.7}));
    matches.targets.push_back(Tensor({3}, {1.0, 0.0, 0.0}));
    CHECK(evaluate(g, s, matches, ErrorMetric::ClassificationError, qc) == 0.0);

    CalibrationSet misses;
    misses.inputs.push_back(Tensor({2}, {0.3, -0.7}));
    misses.targets.push_back(Tensor({3}, {0.0, 1.0, 0.0}));
    CHECK(evaluate(g, s, misses, ErrorMetric::ClassificationError, qc) == 1.0);

    CalibrationSet bad;
    bad.inputs.push_back(Tensor({2}, {0.3, -0.7}));
    bad.targets.push_back(Tensor({2}, {1.0, 0.0}));
    CHECK_THROWS_AS(evaluate(g, s, bad, ErrorMetric::ClassificationError, qc),
                    std::invalid_argument);
}

TEST_CASE("evaluate against targets averages the per-sample mse") {
    std::vector<LayerSpec> layers;
    layers.push_back(linear("fc", 3, 2, {0, 0, 0, 0, 0, 0}, {1.0, 1.0, 0.0}));
    const ModelGraph g = ModelGraph::build({2}, layers);
    const QuantConfig qc = make_quant_config(g, 8, 8);
    ScaleVector s;
    s.bits = 8;
    s.scales = {1.0};

    CalibrationSet cal;
    cal.inputs.push_back(Tensor({2}, {0.1, 0.2}));
    cal.targets.push_back(Tensor({3}, {0.0, 0.0, 0.0})); // mse = 2/3
    cal.inputs.push_back(Tensor({2}, {0.4, 0.5}));
    cal.targets.push_back(Tensor({3}, {1.0, 1.0, 0.0})); // mse = 0
    const double err = evaluate(g, s, cal, ErrorMetric::MseVsTarget, qc);
    CHECK(err == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("range initialization matches an exhaustive grid oracle") {
    std::mt19937_64 rng(21);
    std::vector<LayerSpec> layers;
    layers.push_back(random_linear("fc1", 6, 4, rng));
    layers.push_back(act(LayerKind::GELU, "gelu"));
    layers.push_back(random_linear("fc2", 3, 6, rng));
    const ModelGraph g = ModelGraph::build({4}, layers);
    const CalibrationSet cal = random_cal(22, 10, 4, 3);

    const ScaleVector init = init_scales_mse(g, cal, 4, 50);
    REQUIRE(init.size() == 2);
    CHECK(init.bits == 4);

    // rebuild each slot's observed inputs and search the same grid
    std::vector<std::vector<Tensor>> obs(2);
    for (const Tensor& x : cal.inputs) {
        const ForwardResult r = g.forward_fp(x);
        obs[0].push_back(r.activations[0]);
        obs[1].push_back(r.activations[1]);
    }
    for (std::size_t slot = 0; slot < 2; ++slot) {
        const LayerSpec& l = g.layers()[g.quantized_indices()[slot]];
        const double beta = oracle_layer_beta(l, obs[slot], 4, 50);
        CHECK(init.scales[slot] == scale_from_range(beta, 4).scale);
    }
}

TEST_CASE("range initialization clips a rare outlier at low bit width") {
    // identity layer: its output error is exactly the input quantization error
    std::vector<double> w(16, 0.0);
    for (std::size_t i = 0; i < 4; ++i)
        w[i * 4 + i] = 1.0;
    std::vector<LayerSpec> layers;
    layers.push_back(linear("id", 4, 4, w, {0, 0, 0, 0}));
    const ModelGraph g = ModelGraph::build({4}, layers);

    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(0.5, 1.0);
    CalibrationSet cal;
    for (int i = 0; i < 100; ++i) {
        std::vector<double> xv(4);
        for (double& v : xv)
            v = (i % 2 == 0 ? 1.0 : -1.0) * u(rng);
        cal.inputs.push_back(Tensor({4}, xv));
    }
    cal.inputs.push_back(Tensor({4}, {5.0, 0.6, -0.7, 0.8}));

    const ScaleVector init = init_scales_mse(g, cal, 4, 100);
    const double implied_beta = beta_from_scale(init.scales[0], 4);
    CHECK(implied_beta < 4.5); // moves off the full range
    CHECK(implied_beta > 1.0); // but keeps the whole body
}

TEST_CASE("range initialization falls back on all-zero activations") {
    std::vector<LayerSpec> layers;
    layers.push_back(linear("fc", 2, 2, {0.5, 0.0, 0.0, 0.5}, {0, 0}));
    const ModelGraph g = ModelGraph::build({2}, layers);
    CalibrationSet cal;
    cal.inputs.push_back(Tensor({2}, {0.0, 0.0}));

    std::vector<std::string> warnings;
    const ScaleVector init = init_scales_mse(g, cal, 8, 100, &warnings);
    CHECK(init.scales[0] == scale_from_range(1e-8, 8).scale);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("fc") != std::string::npos);
    CHECK(warnings[0].find("all-zero") != std::string::npos);
}

TEST_CASE("range initialization is local to each layer") {
    // changing downstream weights must not move an upstream layer's range
    std::mt19937_64 rng_a(41), rng_b(42);
    std::vector<LayerSpec> shared;
    shared.push_back(random_linear("fc1", 5, 3, rng_a));
    shared.push_back(act(LayerKind::GELU, "gelu"));

    std::vector<LayerSpec> layers_a = shared;
    layers_a.push_back(random_linear("fc2", 2, 5, rng_a));
    std::vector<LayerSpec> layers_b = shared;
    layers_b.push_back(random_linear("fc2", 2, 5, rng_b));

    const ModelGraph ga = ModelGraph::build({3}, layers_a);
    const ModelGraph gb = ModelGraph::build({3}, layers_b);
    const CalibrationSet cal = random_cal(43, 8, 3, 2);

    const ScaleVector ia = init_scales_mse(ga, cal, 8, 100);
    const ScaleVector ib = init_scales_mse(gb, cal, 8, 100);
    CHECK(ia.scales[0] == ib.scales[0]);
}

TEST_CASE("refinement is skipped when the budget is below the population") {
    const ModelGraph g = two_layer_model(51);
    const CalibrationSet cal = random_cal(52, 6, 3, 2);
    EscConfig cfg;
    cfg.n = 6;
    cfg.budget = 3; // default population for 2 parameters is 4 + floor(3 ln 2) = 6
    cfg.seed = 9;
    const EscResult r = esc_calibrate(g, cal, cfg);
    CHECK(r.stage2_skipped);
    CHECK(r.final_scales.scales == r.init_scales.scales);
    CHECK(r.final_error == r.init_error);
    CHECK(r.trace.empty());
    bool mentioned = false;
    for (const std::string& w : r.warnings)
        mentioned = mentioned || w.find("skipped") != std::string::npos;
    CHECK(mentioned);
}

TEST_CASE("a bias-only model quantizes with zero loss end to end") {
    // zero weights make the quantized forward identical to the float one,
    // so both stages must report exactly zero error against the fp32 output
    std::vector<LayerSpec> layers;
    layers.push_back(linear("fc", 2, 2, {0, 0, 0, 0}, {0.75, -1.25}));
    const ModelGraph g = ModelGraph::build({2}, layers);
    CalibrationSet cal;
    cal.inputs.push_back(Tensor({2}, {0.5, 1.5}));
    cal.inputs.push_back(Tensor({2}, {-2.5, 0.25}));

    EscConfig cfg;
    cfg.n = 2;
    cfg.budget = 8;
    cfg.metric = ErrorMetric::MseVsFp32Output;
    const EscResult r = esc_calibrate(g, cal, cfg);
    CHECK(r.init_error == 0.0);
    CHECK(r.final_error == 0.0);
    CHECK(r.best_seen_error == 0.0);
    CHECK_FALSE(r.stage2_skipped);
    bool weight_warning = false;
    for (const std::string& w : r.warnings)
        weight_warning = weight_warning || w.find("all-zero weights") != std::string::npos;
    CHECK(weight_warning);
}

TEST_CASE("reported errors are recomputable from the returned scales") {
    const ModelGraph g = two_layer_model(61);
    const CalibrationSet cal = random_cal(62, 6, 3, 2);
    EscConfig cfg;
    cfg.act_bits = 4;
    cfg.n = 6; // uses the whole calibration set
    cfg.budget = 20;
    cfg.seed = 5;
    const EscResult r = esc_calibrate(g, cal, cfg);

    const QuantConfig qc = make_quant_config(g, cfg.weight_bits, cfg.act_bits);
    CHECK(r.init_error == evaluate(g, r.init_scales, cal, cfg.metric, qc));
    CHECK(r.final_error == evaluate(g, r.final_scales, cal, cfg.metric, qc));
}

TEST_CASE("calibration is deterministic for a fixed seed") {
    const ModelGraph g = two_layer_model(71);
    const CalibrationSet cal = random_cal(72, 8, 3, 2);
    EscConfig cfg;
    cfg.act_bits = 4;
    cfg.n = 8;
    cfg.budget = 24;
    cfg.seed = 123;
    const EscResult a = esc_calibrate(g, cal, cfg);
    const EscResult b = esc_calibrate(g, cal, cfg);
    CHECK(a.final_scales.scales == b.final_scales.scales);
    CHECK(a.init_error == b.init_error);
    CHECK(a.final_error == b.final_error);
    CHECK(a.best_seen_error == b.best_seen_error);
    CHECK(a.trace.size() == b.trace.size());
}

TEST_CASE("refined scales never collapse below the positivity floor") {
    const ModelGraph g = two_layer_model(81);
    const CalibrationSet cal = random_cal(82, 6, 3, 2);
    EscConfig cfg;
    cfg.n = 6;
    cfg.budget = 30;
    cfg.sigma0 = 2.0; // aggressive steps to stress the clamp
    cfg.seed = 77;
    const EscResult r = esc_calibrate(g, cal, cfg);
    REQUIRE(r.final_scales.size() == r.init_scales.size());
    for (std::size_t i = 0; i < r.final_scales.size(); ++i) {
        CHECK(r.final_scales.scales[i] >= 1e-6 * r.init_scales.scales[i]);
        CHECK(r.final_scales.scales[i] > 0.0);
    }
}

TEST_CASE("the 100th percentile baseline equals the max baseline") {
    const ModelGraph g = two_layer_model(91);
    const CalibrationSet cal = random_cal(92, 10, 3, 2);
    EscConfig cfg;
    cfg.n = 10;
    BaselineMethod pct;
    pct.kind = BaselineMethod::Percentile;
    pct.percentile = 100.0;
    BaselineMethod mx;
    mx.kind = BaselineMethod::Max;
    const BaselineResult a = run_baseline(g, cal, pct, cfg);
    const BaselineResult b = run_baseline(g, cal, mx, cfg);
    CHECK(a.scales.scales == b.scales.scales);
    CHECK(a.cal_error == b.cal_error);
}

TEST_CASE("baselines fall back with a warning on an all-zero activation") {
    // the first layer zeroes everything, so the layer after it observes only
    // zeros and must get the fallback range
    std::mt19937_64 rng(101);
    std::vector<LayerSpec> layers;
    layers.push_back(linear("z", 2, 2, {0, 0, 0, 0}, {0.0, 0.0}));
    layers.push_back(act(LayerKind::ReLU, "relu"));
    layers.push_back(random_linear("after", 2, 2, rng));
    const ModelGraph g = ModelGraph::build({2}, layers);

    CalibrationSet cal;
    cal.inputs.push_back(Tensor({2}, {1.0, -2.0}));
    EscConfig cfg;
    cfg.n = 1;
    cfg.metric = ErrorMetric::MseVsFp32Output;
    BaselineMethod mx;
    mx.kind = BaselineMethod::Max;
    const BaselineResult r = run_baseline(g, cal, mx, cfg);
    REQUIRE(r.scales.size() == 2);
    CHECK(r.scales.scales[1] == scale_from_range(1e-8, 8).scale);
    bool mentioned = false;
    for (const std::string& w : r.warnings)
        mentioned = mentioned ||
                    (w.find("after") != std::string::npos &&
                     w.find("calibrated range is zero") != std::string::npos);
    CHECK(mentioned);
}

TEST_CASE("8-bit max calibration keeps the toy classifier accurate") {
    const fs::path dir = temp_dir("cls_toy");
    const SynthArtifacts art = synth_classification_toy(3, dir.string(), 100, 100);
    const ModelGraph g = ModelGraph::load(art.model_manifest);
    const CalibrationSet cal = load_calibration_set(art.cal_manifest);

    EscConfig cfg;
    cfg.n = 100;
    cfg.metric = ErrorMetric::ClassificationError;
    BaselineMethod mx;
    mx.kind = BaselineMethod::Max;
    const BaselineResult r = run_baseline(g, cal, mx, cfg);
    CHECK(r.cal_error <= 0.02);

    // the entropy baseline also runs end to end on histogram data
    BaselineMethod ent;
    ent.kind = BaselineMethod::Entropy;
    const BaselineResult e = run_baseline(g, cal, ent, cfg);
    for (double s : e.scales.scales)
        CHECK(s > 0.0);
}

TEST_CASE("4-bit max calibration loses badly to mse on heavy-tailed data") {
    const fs::path dir = temp_dir("heavytail");
    const SynthArtifacts art = synth_regression_heavytail(17, dir.string(), 100, 100);
    const ModelGraph g = ModelGraph::load(art.model_manifest);
    const CalibrationSet cal = load_calibration_set(art.cal_manifest);

    EscConfig cfg;
    cfg.act_bits = 4;
    cfg.n = 100;
    BaselineMethod mx;
    mx.kind = BaselineMethod::Max;
    BaselineMethod ms;
    ms.kind = BaselineMethod::Mse;
    const BaselineResult a = run_baseline(g, cal, mx, cfg);
    const BaselineResult b = run_baseline(g, cal, ms, cfg);
    CHECK(a.cal_error >= 3.0 * b.cal_error);
}
