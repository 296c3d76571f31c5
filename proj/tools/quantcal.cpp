#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "quantcal/esc.hpp"
#include "quantcal/model.hpp"
#include "quantcal/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace quantcal;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct Options {
    std::uint64_t seed = 0;
    int bits = 8;
    double sigma0 = 0.1;
    long long budget = 100;
    int n = 100;
    std::string metric = "mse_vs_target";
    std::string out = ".";
};

void add_common_flags(CLI::App* cmd, Options& o, bool with_esc_flags = true) {
    cmd->add_option("--seed", o.seed, "Seed for every random choice");
    cmd->add_option("--bits", o.bits, "Quantization bit width")
        ->check(CLI::Range(2, 16));
    if (with_esc_flags) {
        cmd->add_option("--sigma0", o.sigma0, "Initial search step size");
        cmd->add_option("--budget", o.budget, "Objective evaluation budget");
        cmd->add_option("--n", o.n, "Calibration samples used");
        cmd->add_option("--metric", o.metric,
                        "mse_vs_target, mse_vs_fp32 or classification_error");
    }
    cmd->add_option("--out", o.out, "Output directory");
}

EscConfig make_config(const Options& o) {
    EscConfig cfg;
    cfg.act_bits = o.bits;
    cfg.weight_bits = o.bits;
    cfg.sigma0 = o.sigma0;
    cfg.budget = o.budget;
    cfg.n = o.n;
    cfg.seed = o.seed;
    cfg.metric = error_metric_from_string(o.metric);
    return cfg;
}

json config_json(const EscConfig& c) {
    return json{{"act_bits", c.act_bits},   {"weight_bits", c.weight_bits},
                {"sigma0", c.sigma0},       {"budget", c.budget},
                {"n", c.n},                 {"seed", c.seed},
                {"metric", error_metric_name(c.metric)},
                {"lambda", c.lambda},       {"grid", c.grid}};
}

json run_manifest(const std::string& command, const EscConfig& cfg,
                  const std::vector<std::string>& inputs,
                  const std::vector<std::string>& outputs) {
    // Wall-clock duration deliberately stays out of emitted artifacts so that
    // identical seeds produce byte-identical files; it is logged to stderr.
    return json{{"command", command},   {"config", config_json(cfg)},
                {"inputs", inputs},     {"outputs", outputs},
                {"seed", cfg.seed},     {"tool_version", kToolVersion}};
}

json scales_json(const ScaleVector& s) {
    return json{{"bits", s.bits}, {"scales", s.scales}};
}

json trace_json(const std::vector<TracePoint>& trace) {
    json arr = json::array();
    for (const TracePoint& p : trace)
        arr.push_back(json{{"t", p.t},
                           {"evals", p.evals},
                           {"sigma", p.sigma},
                           {"best_f", p.best_f},
                           {"mean_f", p.mean_f}});
    return arr;
}

void write_text(const std::string& path, const std::string& text) {
    fs::create_directories(fs::path(path).parent_path().empty()
                               ? "."
                               : fs::path(path).parent_path().string());
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open " + path + " for writing");
    out << text;
    if (!out)
        throw std::runtime_error("write failed: " + path);
}

void write_report(const std::string& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
}

std::string num(double v) { return json(v).dump(); }

// Task error of the unquantized model, the comparison baseline.
double fp_error(const ModelGraph& g, const CalibrationSet& set,
                ErrorMetric metric) {
    if (set.inputs.empty())
        throw std::invalid_argument("evaluation set is empty");
    if (metric == ErrorMetric::MseVsFp32Output)
        return 0.0;
    if (set.targets.size() != set.inputs.size())
        throw std::invalid_argument(std::string(error_metric_name(metric)) +
                                    " needs one target per input");
    double sum = 0.0;
    for (std::size_t i = 0; i < set.inputs.size(); ++i) {
        const Tensor out = g.forward_fp(set.inputs[i]).output;
        if (metric == ErrorMetric::MseVsTarget) {
            sum += mse(out, set.targets[i]);
        } else {
            const auto am = [](const Tensor& t) {
                return std::max_element(t.values().begin(), t.values().end()) -
                       t.values().begin();
            };
            sum += am(out) != am(set.targets[i]) ? 1.0 : 0.0;
        }
    }
    return sum / static_cast<double>(set.inputs.size());
}

int cmd_synth(const std::string& task, const Options& o) {
    const EscConfig cfg = make_config(o);
    const SynthArtifacts art =
        synth_task(task, o.seed, o.out, o.n, 2 * o.n);
    const std::vector<std::string> outputs{art.model_manifest,
                                           art.cal_manifest,
                                           art.eval_manifest};
    const json run = run_manifest("synth " + task, cfg, {}, outputs);
    for (const std::string& path : outputs) {
        std::ifstream in(path);
        json j;
        in >> j;
        j["run"] = run;
        write_report(path, j);
    }
    std::cout << json{{"task", task}, {"outputs", outputs}}.dump(2) << "\n";
    return 0;
}

int cmd_calibrate(const std::string& model_path, const std::string& cal_path,
                  const std::string& method, double percentile,
                  bool have_percentile, const Options& o) {
    const ModelGraph g = ModelGraph::load(model_path);
    const CalibrationSet cal = load_calibration_set(cal_path);
    const EscConfig cfg = make_config(o);

    json report{{"method", method}, {"config", config_json(cfg)}};
    if (o.bits != 4 && o.bits != 8)
        report["note"] = "bit width " + std::to_string(o.bits) +
                         " is outside the usual 4- or 8-bit presets";

    if (method == "esc") {
        const EscResult r = esc_calibrate(g, cal, cfg);
        report["result"] = json{{"init_scales", scales_json(r.init_scales)},
                                {"final_scales", scales_json(r.final_scales)},
                                {"init_error", r.init_error},
                                {"final_error", r.final_error},
                                {"best_seen_error", r.best_seen_error},
                                {"stage2_skipped", r.stage2_skipped},
                                {"trace", trace_json(r.trace)},
                                {"warnings", r.warnings}};
    } else {
        BaselineMethod m;
        std::vector<double> percentiles;
        if (method == "max") {
            m.kind = BaselineMethod::Max;
        } else if (method == "percentile") {
            m.kind = BaselineMethod::Percentile;
            if (have_percentile)
                percentiles = {percentile};
            else
                percentiles = {99.99, 99.999, 99.9999};
        } else if (method == "entropy") {
            m.kind = BaselineMethod::Entropy;
        } else if (method == "mse") {
            m.kind = BaselineMethod::Mse;
        } else {
            throw std::invalid_argument(
                "unknown method \"" + method +
                "\" (expected max, percentile, entropy, mse or esc)");
        }
        json results = json::array();
        if (percentiles.empty()) {
            const BaselineResult r = run_baseline(g, cal, m, cfg);
            results.push_back(json{{"scales", scales_json(r.scales)},
                                   {"cal_error", r.cal_error},
                                   {"warnings", r.warnings}});
        } else {
            for (double p : percentiles) {
                m.percentile = p;
                const BaselineResult r = run_baseline(g, cal, m, cfg);
                results.push_back(json{{"percentile", p},
                                       {"scales", scales_json(r.scales)},
                                       {"cal_error", r.cal_error},
                                       {"warnings", r.warnings}});
            }
        }
        report["results"] = results;
    }

    const std::string out_path =
        (fs::path(o.out) / ("calibrate_" + method + ".json")).string();
    report["run"] =
        run_manifest("calibrate " + method, cfg, {model_path, cal_path},
                     {out_path});
    write_report(out_path, report);
    std::cout << out_path << "\n";
    return 0;
}

int cmd_compare(const std::string& model_path, const std::string& cal_path,
                const std::string& eval_path, const Options& o) {
    const ModelGraph g = ModelGraph::load(model_path);
    const CalibrationSet cal = load_calibration_set(cal_path);
    const CalibrationSet eval_set = load_calibration_set(eval_path);
    const EscConfig cfg = make_config(o);

    struct Row {
        std::string method;
        double cal_error = 0.0;
        double eval_error = 0.0;
        bool failed = false;
        std::string error;
        std::vector<std::string> warnings;
    };
    std::vector<Row> rows;

    auto guarded = [&](const std::string& name, auto&& fn) {
        Row row;
        row.method = name;
        try {
            fn(row);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    };

    guarded("fp32", [&](Row& row) {
        CalibrationSet sub;
        const std::size_t take =
            std::min<std::size_t>(cal.size(), static_cast<std::size_t>(cfg.n));
        sub.inputs.assign(cal.inputs.begin(), cal.inputs.begin() + take);
        if (!cal.targets.empty())
            sub.targets.assign(cal.targets.begin(), cal.targets.begin() + take);
        row.cal_error = fp_error(g, sub, cfg.metric);
        row.eval_error = fp_error(g, eval_set, cfg.metric);
    });

    const QuantConfig qc = make_quant_config(g, cfg.weight_bits, cfg.act_bits);
    auto baseline_row = [&](const std::string& name, BaselineMethod m) {
        guarded(name, [&](Row& row) {
            const BaselineResult r = run_baseline(g, cal, m, cfg);
            row.cal_error = r.cal_error;
            row.eval_error = evaluate(g, r.scales, eval_set, cfg.metric, qc);
            row.warnings = r.warnings;
        });
    };

    baseline_row("max", {BaselineMethod::Max, 0.0});
    for (double p : {99.99, 99.999, 99.9999})
        baseline_row("percentile_" + num(p), {BaselineMethod::Percentile, p});
    baseline_row("entropy", {BaselineMethod::Entropy, 0.0});
    baseline_row("mse", {BaselineMethod::Mse, 0.0});
    guarded("esc", [&](Row& row) {
        const EscResult r = esc_calibrate(g, cal, cfg);
        row.cal_error = r.final_error;
        row.eval_error = evaluate(g, r.final_scales, eval_set, cfg.metric, qc);
        row.warnings = r.warnings;
    });

    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.failed != b.failed) return !a.failed;
        return a.eval_error < b.eval_error;
    });

    const std::string json_path = (fs::path(o.out) / "compare.json").string();
    const std::string csv_path = (fs::path(o.out) / "compare.csv").string();
    const json run = run_manifest("compare", cfg,
                                  {model_path, cal_path, eval_path},
                                  {json_path, csv_path});

    json jrows = json::array();
    std::string csv = "# run: " + run.dump() + "\n";
    csv += "rank,method,cal_error,eval_error,status\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Row& r = rows[i];
        json jr{{"rank", i + 1}, {"method", r.method}};
        if (r.failed) {
            jr["error"] = r.error;
        } else {
            jr["cal_error"] = r.cal_error;
            jr["eval_error"] = r.eval_error;
            if (!r.warnings.empty()) jr["warnings"] = r.warnings;
        }
        jrows.push_back(jr);
        csv += std::to_string(i + 1) + "," + r.method + ",";
        csv += r.failed ? "," : num(r.cal_error) + "," + num(r.eval_error);
        csv += std::string(",") + (r.failed ? ("failed: " + r.error) : "ok");
        csv += "\n";
    }

    write_report(json_path, json{{"metric", error_metric_name(cfg.metric)},
                                 {"bits", o.bits},
                                 {"rows", jrows},
                                 {"run", run}});
    write_text(csv_path, csv);
    std::cout << csv_path << "\n" << json_path << "\n";

    bool any_failed = false;
    for (const Row& r : rows) any_failed |= r.failed;
    return any_failed ? 1 : 0;
}

int cmd_cdf(const std::string& model_path, const std::string& cal_path,
            const std::string& layer, const Options& o) {
    const ModelGraph g = ModelGraph::load(model_path);
    const CalibrationSet cal = load_calibration_set(cal_path);
    const EscConfig cfg = make_config(o);
    const auto cdf = activation_cdf(g, cal, layer);

    const std::string csv_path =
        (fs::path(o.out) / ("cdf_" + layer + ".csv")).string();
    const json run = run_manifest("cdf " + layer, cfg, {model_path, cal_path},
                                  {csv_path});
    std::string csv = "# run: " + run.dump() + "\n";
    csv += "normalized_value,cumulative_fraction\n";
    for (const auto& [x, f] : cdf)
        csv += num(x) + "," + num(f) + "\n";
    write_text(csv_path, csv);
    std::cout << csv_path << "\n";
    return 0;
}

int cmd_trace(const std::string& model_path, const std::string& cal_path,
              const Options& o) {
    const ModelGraph g = ModelGraph::load(model_path);
    const CalibrationSet cal = load_calibration_set(cal_path);
    const EscConfig cfg = make_config(o);
    const EscResult r = esc_calibrate(g, cal, cfg);

    const std::string jsonl_path = (fs::path(o.out) / "trace.jsonl").string();
    const std::string report_path = (fs::path(o.out) / "trace.json").string();
    write_text(jsonl_path, trace_to_jsonl(r.trace));
    const json run = run_manifest("trace", cfg, {model_path, cal_path},
                                  {jsonl_path, report_path});
    write_report(report_path,
                 json{{"init_error", r.init_error},
                      {"final_error", r.final_error},
                      {"best_seen_error", r.best_seen_error},
                      {"stage2_skipped", r.stage2_skipped},
                      {"generations", r.trace.size()},
                      {"warnings", r.warnings},
                      {"run", run}});
    std::cout << jsonl_path << "\n" << report_path << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Post-training quantization calibration toolkit"};
    app.require_subcommand(1);

    Options o;
    std::string task = "regression_heavytail";
    std::string model_path, cal_path, eval_path, method = "max", layer;
    double percentile = 99.99;

    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic task");
    synth->add_option("--task", task,
                      "regression_heavytail or classification_toy");
    add_common_flags(synth, o);

    CLI::App* calibrate =
        app.add_subcommand("calibrate", "Calibrate activation scales");
    calibrate->add_option("--model", model_path, "Model manifest")->required();
    calibrate->add_option("--cal", cal_path, "Calibration manifest")->required();
    calibrate->add_option("--method", method,
                          "max, percentile, entropy, mse or esc");
    CLI::Option* pct_opt =
        calibrate->add_option("--percentile", percentile,
                              "Percentile (omit to evaluate all presets)");
    add_common_flags(calibrate, o);

    CLI::App* compare =
        app.add_subcommand("compare", "Rank all methods by eval error");
    compare->add_option("--model", model_path, "Model manifest")->required();
    compare->add_option("--cal", cal_path, "Calibration manifest")->required();
    compare->add_option("--eval", eval_path, "Eval manifest")->required();
    add_common_flags(compare, o);

    CLI::App* cdf = app.add_subcommand("cdf", "Emit an activation CDF");
    cdf->add_option("--model", model_path, "Model manifest")->required();
    cdf->add_option("--cal", cal_path, "Calibration manifest")->required();
    cdf->add_option("--layer", layer, "Quantized layer name")->required();
    add_common_flags(cdf, o, false);

    CLI::App* trace = app.add_subcommand("trace", "Emit the refinement trace");
    trace->add_option("--model", model_path, "Model manifest")->required();
    trace->add_option("--cal", cal_path, "Calibration manifest")->required();
    add_common_flags(trace, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json{{"error", {{"type", "usage"},
                                     {"message", e.what()}}}}
                         .dump()
                  << "\n";
        return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
    }

    const auto t0 = std::chrono::steady_clock::now();
    int rc = 1;
    std::string cmd_name;
    try {
        if (synth->parsed()) {
            cmd_name = "synth";
            rc = cmd_synth(task, o);
        } else if (calibrate->parsed()) {
            cmd_name = "calibrate";
            rc = cmd_calibrate(model_path, cal_path, method, percentile,
                               pct_opt->count() > 0, o);
        } else if (compare->parsed()) {
            cmd_name = "compare";
            rc = cmd_compare(model_path, cal_path, eval_path, o);
        } else if (cdf->parsed()) {
            cmd_name = "cdf";
            rc = cmd_cdf(model_path, cal_path, layer, o);
        } else if (trace->parsed()) {
            cmd_name = "trace";
            rc = cmd_trace(model_path, cal_path, o);
        }
    } catch (const std::exception& e) {
        std::cerr << json{{"error", {{"type", "runtime"},
                                     {"command", cmd_name},
                                     {"message", e.what()}}}}
                         .dump()
                  << "\n";
        return 1;
    }
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    std::cerr << "[quantcal] " << cmd_name << " finished in " << ms << " ms\n";
    return rc;
}
