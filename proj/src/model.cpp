#include "quantcal/model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace quantcal {

namespace fs = std::filesystem;
using nlohmann::json;

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Linear: return "Linear";
        case LayerKind::Conv1d: return "Conv1d";
        case LayerKind::LayerNorm: return "LayerNorm";
        case LayerKind::ReLU: return "ReLU";
        case LayerKind::GELU: return "GELU";
    }
    return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
    if (s == "Linear") return LayerKind::Linear;
    if (s == "Conv1d") return LayerKind::Conv1d;
    if (s == "LayerNorm") return LayerKind::LayerNorm;
    if (s == "ReLU") return LayerKind::ReLU;
    if (s == "GELU") return LayerKind::GELU;
    throw std::invalid_argument("unknown layer kind \"" + s +
                                "\" (expected Linear, Conv1d, LayerNorm, ReLU or GELU)");
}

bool layer_is_quantized(LayerKind k) {
    return k == LayerKind::Linear || k == LayerKind::Conv1d ||
           k == LayerKind::LayerNorm;
}

std::vector<std::size_t> layer_output_shape(const LayerSpec& layer,
                                            const std::vector<std::size_t>& in_shape) {
    switch (layer.kind) {
        case LayerKind::Linear: {
            if (layer.weight.rank() != 2)
                throw std::invalid_argument("layer " + layer.name +
                                            ": Linear weight must be rank 2");
            const std::size_t in = layer.weight.shape()[1];
            const std::size_t out = layer.weight.shape()[0];
            if (shape_numel(in_shape) != in)
                throw std::invalid_argument(
                    "layer " + layer.name + ": Linear expects " + std::to_string(in) +
                    " input values but gets shape " + shape_to_string(in_shape));
            if (layer.bias.size() != out)
                throw std::invalid_argument("layer " + layer.name +
                                            ": bias length must equal out features");
            return {out};
        }
        case LayerKind::Conv1d: {
            if (layer.weight.rank() != 3)
                throw std::invalid_argument("layer " + layer.name +
                                            ": Conv1d weight must be rank 3");
            if (in_shape.size() != 2)
                throw std::invalid_argument("layer " + layer.name +
                                            ": Conv1d expects [channels, length] input, got " +
                                            shape_to_string(in_shape));
            const std::size_t c_out = layer.weight.shape()[0];
            const std::size_t c_in = layer.weight.shape()[1];
            const std::size_t k = layer.weight.shape()[2];
            if (in_shape[0] != c_in)
                throw std::invalid_argument("layer " + layer.name + ": expects " +
                                            std::to_string(c_in) + " input channels, got " +
                                            std::to_string(in_shape[0]));
            if (layer.stride < 1 || layer.padding < 0)
                throw std::invalid_argument("layer " + layer.name +
                                            ": stride must be >= 1 and padding >= 0");
            if (layer.bias.size() != c_out)
                throw std::invalid_argument("layer " + layer.name +
                                            ": bias length must equal out channels");
            const long long span = static_cast<long long>(in_shape[1]) +
                                   2LL * layer.padding - static_cast<long long>(k);
            if (span < 0)
                throw std::invalid_argument("layer " + layer.name +
                                            ": kernel larger than padded input");
            const std::size_t l_out = static_cast<std::size_t>(span / layer.stride) + 1;
            return {c_out, l_out};
        }
        case LayerKind::LayerNorm: {
            if (in_shape.empty())
                throw std::invalid_argument("layer " + layer.name + ": empty input shape");
            const std::size_t d = in_shape.back();
            if (layer.weight.rank() != 1 || layer.weight.size() != d ||
                layer.bias.size() != d)
                throw std::invalid_argument(
                    "layer " + layer.name + ": LayerNorm affine tensors must have length " +
                    std::to_string(d));
            if (!(layer.eps > 0.0))
                throw std::invalid_argument("layer " + layer.name + ": eps must be > 0");
            return in_shape;
        }
        case LayerKind::ReLU:
        case LayerKind::GELU:
            return in_shape;
    }
    throw std::logic_error("unreachable layer kind");
}

namespace {

Tensor linear_forward(const LayerSpec& l, const Tensor& x, const Tensor& w) {
    const std::size_t out = w.shape()[0];
    const std::size_t in = w.shape()[1];
    std::vector<double> y(out);
    for (std::size_t o = 0; o < out; ++o) {
        double acc = l.bias[o];
        const std::size_t row = o * in;
        for (std::size_t i = 0; i < in; ++i)
            acc += w[row + i] * x[i];
        y[o] = acc;
    }
    return Tensor({out}, std::move(y));
}

Tensor conv1d_forward(const LayerSpec& l, const Tensor& x, const Tensor& w) {
    const std::size_t c_out = w.shape()[0];
    const std::size_t c_in = w.shape()[1];
    const std::size_t k = w.shape()[2];
    const std::size_t len = x.shape()[1];
    const auto out_shape = layer_output_shape(l, x.shape());
    const std::size_t l_out = out_shape[1];
    std::vector<double> y(c_out * l_out);
    for (std::size_t co = 0; co < c_out; ++co) {
        for (std::size_t p = 0; p < l_out; ++p) {
            double acc = l.bias[co];
            const long long start = static_cast<long long>(p) * l.stride - l.padding;
            for (std::size_t ci = 0; ci < c_in; ++ci) {
                for (std::size_t t = 0; t < k; ++t) {
                    const long long pos = start + static_cast<long long>(t);
                    if (pos < 0 || pos >= static_cast<long long>(len))
                        continue; // zero padding
                    acc += w[(co * c_in + ci) * k + t] * x[ci * len + pos];
                }
            }
            y[co * l_out + p] = acc;
        }
    }
    return Tensor(out_shape, std::move(y));
}

Tensor layernorm_forward(const LayerSpec& l, const Tensor& x, const Tensor& w) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    std::vector<double> y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            mean += x[base + i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = x[base + i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + l.eps);
        for (std::size_t i = 0; i < d; ++i)
            y[base + i] = (x[base + i] - mean) * inv * w[i] + l.bias[i];
    }
    return Tensor(x.shape(), std::move(y));
}

Tensor relu_forward(const Tensor& x) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return Tensor(x.shape(), std::move(y));
}

Tensor gelu_forward(const Tensor& x) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] / std::sqrt(2.0)));
    return Tensor(x.shape(), std::move(y));
}

Tensor layer_forward_with_weight(const LayerSpec& l, const Tensor& x, const Tensor& w) {
    switch (l.kind) {
        case LayerKind::Linear: return linear_forward(l, x, w);
        case LayerKind::Conv1d: return conv1d_forward(l, x, w);
        case LayerKind::LayerNorm: return layernorm_forward(l, x, w);
        case LayerKind::ReLU: return relu_forward(x);
        case LayerKind::GELU: return gelu_forward(x);
    }
    throw std::logic_error("unreachable layer kind");
}

} // namespace

Tensor layer_forward(const LayerSpec& layer, const Tensor& input) {
    layer_output_shape(layer, input.shape()); // validate
    return layer_forward_with_weight(layer, input, layer.weight);
}

ModelGraph ModelGraph::build(std::vector<std::size_t> input_shape,
                             std::vector<LayerSpec> layers) {
    if (layers.empty())
        throw std::invalid_argument("model needs at least one layer");
    ModelGraph g;
    g.input_shape_ = std::move(input_shape);
    if (g.input_shape_.empty() || shape_numel(g.input_shape_) == 0)
        throw std::invalid_argument("bad model input shape");
    std::set<std::string> names;
    std::vector<std::size_t> shape = g.input_shape_;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        LayerSpec& l = layers[i];
        if (l.name.empty())
            throw std::invalid_argument("layer " + std::to_string(i) + " has no name");
        if (!names.insert(l.name).second)
            throw std::invalid_argument("duplicate layer name \"" + l.name + "\"");
        shape = layer_output_shape(l, shape); // throws on mismatch
        if (layer_is_quantized(l.kind))
            g.quantized_.push_back(i);
    }
    g.output_shape_ = shape;
    g.layers_ = std::move(layers);
    return g;
}

ForwardResult ModelGraph::forward_fp(const Tensor& x) const {
    if (x.shape() != input_shape_)
        throw std::invalid_argument("input shape " + shape_to_string(x.shape()) +
                                    " does not match model input " +
                                    shape_to_string(input_shape_));
    ForwardResult res;
    res.activations.reserve(quantized_.size());
    Tensor cur = x;
    for (const LayerSpec& l : layers_) {
        if (layer_is_quantized(l.kind))
            res.activations.push_back(cur);
        cur = layer_forward_with_weight(l, cur, l.weight);
    }
    res.output = std::move(cur);
    return res;
}

Tensor ModelGraph::forward_quant(const Tensor& x, const ScaleVector& s,
                                 const QuantConfig& qc) const {
    if (x.shape() != input_shape_)
        throw std::invalid_argument("input shape " + shape_to_string(x.shape()) +
                                    " does not match model input " +
                                    shape_to_string(input_shape_));
    if (s.size() != quantized_.size())
        throw std::invalid_argument("scale vector has " + std::to_string(s.size()) +
                                    " entries but the model has " +
                                    std::to_string(quantized_.size()) +
                                    " quantized layers");
    if (s.bits != qc.act_bits)
        throw std::invalid_argument("scale vector bit width does not match config");
    if (qc.weight_params.size() != quantized_.size() ||
        qc.fq_weights.size() != quantized_.size())
        throw std::invalid_argument("quant config does not match the model");
    for (double v : s.scales)
        if (!(v > 0.0) || !std::isfinite(v))
            throw std::invalid_argument("activation scales must be positive and finite");

    Tensor cur = x;
    std::size_t slot = 0;
    for (const LayerSpec& l : layers_) {
        if (layer_is_quantized(l.kind)) {
            const QuantParams ap = params_from_scale(s.scales[slot], qc.act_bits);
            cur = layer_forward_with_weight(l, fake_quantize(cur, ap),
                                            qc.fq_weights[slot]);
            ++slot;
        } else {
            cur = layer_forward_with_weight(l, cur, l.weight);
        }
    }
    return cur;
}

QuantConfig make_quant_config(const ModelGraph& g, int weight_bits, int act_bits) {
    QuantConfig qc;
    qc.weight_bits = weight_bits;
    qc.act_bits = act_bits;
    for (std::size_t idx : g.quantized_indices()) {
        const LayerSpec& l = g.layers()[idx];
        double beta;
        try {
            beta = calibrate_max({l.weight});
        } catch (const DegenerateRangeError&) {
            beta = 1e-8;
            qc.warnings.push_back("layer " + l.name +
                                  ": all-zero weights, using fallback range 1e-8");
        }
        const QuantParams wp = scale_from_range(beta, weight_bits);
        qc.weight_params.push_back(wp);
        qc.fq_weights.push_back(fake_quantize(l.weight, wp));
    }
    return qc;
}

std::vector<Tensor> collect_activations(const ModelGraph& g,
                                        const CalibrationSet& cal) {
    if (cal.inputs.empty())
        throw std::invalid_argument("calibration set is empty");
    std::vector<std::vector<double>> buf(g.num_quantized());
    std::vector<std::vector<std::size_t>> sample_shape(g.num_quantized());
    for (const Tensor& x : cal.inputs) {
        ForwardResult r = g.forward_fp(x);
        for (std::size_t i = 0; i < r.activations.size(); ++i) {
            const Tensor& a = r.activations[i];
            sample_shape[i] = a.shape();
            buf[i].insert(buf[i].end(), a.values().begin(), a.values().end());
        }
    }
    std::vector<Tensor> out;
    out.reserve(g.num_quantized());
    for (std::size_t i = 0; i < g.num_quantized(); ++i) {
        std::vector<std::size_t> shape = sample_shape[i];
        shape.insert(shape.begin(), cal.inputs.size());
        out.emplace_back(std::move(shape), std::move(buf[i]));
    }
    return out;
}

std::vector<std::pair<double, double>> activation_cdf(const ModelGraph& g,
                                                      const CalibrationSet& cal,
                                                      const std::string& layer_name) {
    std::size_t slot = g.num_quantized();
    std::size_t seen = 0;
    std::string known;
    for (std::size_t idx : g.quantized_indices()) {
        const std::string& n = g.layers()[idx].name;
        if (!known.empty()) known += ", ";
        known += n;
        if (n == layer_name) slot = seen;
        ++seen;
    }
    if (slot == g.num_quantized())
        throw std::invalid_argument("no quantized layer named \"" + layer_name +
                                    "\" (quantized layers: " + known + ")");
    std::vector<Tensor> acts = collect_activations(g, cal);
    std::vector<double> mags;
    mags.reserve(acts[slot].size());
    for (double v : acts[slot].values())
        mags.push_back(std::fabs(v));
    std::sort(mags.begin(), mags.end());
    const double abs_max = mags.back();
    const std::size_t n = mags.size();
    const std::size_t points = std::min<std::size_t>(n, 1000);
    std::vector<std::pair<double, double>> cdf;
    cdf.reserve(points);
    if (abs_max == 0.0)
        return {{0.0, 1.0}};
    for (std::size_t k = 1; k <= points; ++k) {
        // quantile-spaced subsample; the last point is always (1, 1)
        const std::size_t rank = (k * n) / points;
        cdf.emplace_back(mags[rank - 1] / abs_max,
                         static_cast<double>(rank) / static_cast<double>(n));
    }
    return cdf;
}

namespace {

json read_json_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error(std::string("cannot open ") + what + " " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error(std::string("invalid JSON in ") + what + " " + path +
                                 ": " + e.what());
    }
    return j;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open " + path + " for writing");
    out << text;
    if (!out)
        throw std::runtime_error("write failed: " + path);
}

} // namespace

ModelGraph ModelGraph::load(const std::string& manifest_path) {
    const json j = read_json_file(manifest_path, "model manifest");
    const fs::path base = fs::path(manifest_path).parent_path();
    if (!j.contains("input_shape") || !j.contains("layers"))
        throw std::runtime_error("model manifest " + manifest_path +
                                 " needs input_shape and layers");
    std::vector<std::size_t> input_shape;
    for (const auto& d : j.at("input_shape")) {
        const long long v = d.get<long long>();
        if (v < 1)
            throw std::runtime_error("model manifest has non-positive input dim");
        input_shape.push_back(static_cast<std::size_t>(v));
    }
    std::vector<LayerSpec> layers;
    for (const auto& lj : j.at("layers")) {
        LayerSpec l;
        l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
        l.name = lj.at("name").get<std::string>();
        const json hyper = lj.value("hyper", json::object());
        l.stride = hyper.value("stride", 1);
        l.padding = hyper.value("padding", 0);
        l.eps = hyper.value("eps", 1e-5);
        if (lj.contains("weights") && !lj.at("weights").empty()) {
            const json& w = lj.at("weights");
            if (w.contains("W"))
                l.weight = load_tensor((base / w.at("W").get<std::string>()).string());
            if (w.contains("b"))
                l.bias = load_tensor((base / w.at("b").get<std::string>()).string());
        }
        layers.push_back(std::move(l));
    }
    try {
        return build(std::move(input_shape), std::move(layers));
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error("model manifest " + manifest_path + ": " + e.what());
    }
}

void save_model(const ModelGraph& g, const std::string& dir,
                const std::string& manifest_name) {
    fs::create_directories(fs::path(dir) / "weights");
    json layers = json::array();
    for (const LayerSpec& l : g.layers()) {
        json lj{{"kind", layer_kind_name(l.kind)}, {"name", l.name}};
        json hyper = json::object();
        if (l.kind == LayerKind::Conv1d) {
            hyper["stride"] = l.stride;
            hyper["padding"] = l.padding;
        }
        if (l.kind == LayerKind::LayerNorm)
            hyper["eps"] = l.eps;
        lj["hyper"] = hyper;
        json weights = json::object();
        if (l.weight.size() > 0) {
            const std::string wp = "weights/" + l.name + "_W.qct";
            save_tensor((fs::path(dir) / wp).string(), l.weight);
            weights["W"] = wp;
        }
        if (l.bias.size() > 0) {
            const std::string bp = "weights/" + l.name + "_b.qct";
            save_tensor((fs::path(dir) / bp).string(), l.bias);
            weights["b"] = bp;
        }
        lj["weights"] = weights;
        layers.push_back(lj);
    }
    json manifest{{"input_shape", g.input_shape()}, {"layers", layers}};
    write_text_file((fs::path(dir) / manifest_name).string(), manifest.dump(2) + "\n");
}

CalibrationSet load_calibration_set(const std::string& manifest_path) {
    const json j = read_json_file(manifest_path, "calibration manifest");
    const fs::path base = fs::path(manifest_path).parent_path();
    CalibrationSet cal;
    if (!j.contains("inputs"))
        throw std::runtime_error("calibration manifest " + manifest_path +
                                 " needs an inputs list");
    for (const auto& p : j.at("inputs"))
        cal.inputs.push_back(load_tensor((base / p.get<std::string>()).string()));
    if (j.contains("targets"))
        for (const auto& p : j.at("targets"))
            cal.targets.push_back(load_tensor((base / p.get<std::string>()).string()));
    if (cal.inputs.empty())
        throw std::runtime_error("calibration manifest " + manifest_path +
                                 " lists no inputs");
    if (!cal.targets.empty() && cal.targets.size() != cal.inputs.size())
        throw std::runtime_error("calibration manifest " + manifest_path + " has " +
                                 std::to_string(cal.inputs.size()) + " inputs but " +
                                 std::to_string(cal.targets.size()) + " targets");
    return cal;
}

void save_calibration_set(const CalibrationSet& cal, const std::string& dir,
                          const std::string& manifest_name) {
    const std::string stem = fs::path(manifest_name).stem().string();
    fs::create_directories(fs::path(dir) / stem);
    json inputs = json::array(), targets = json::array();
    char buf[64];
    for (std::size_t i = 0; i < cal.inputs.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%s/in_%04zu.qct", stem.c_str(), i);
        save_tensor((fs::path(dir) / buf).string(), cal.inputs[i]);
        inputs.push_back(buf);
    }
    for (std::size_t i = 0; i < cal.targets.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%s/tgt_%04zu.qct", stem.c_str(), i);
        save_tensor((fs::path(dir) / buf).string(), cal.targets[i]);
        targets.push_back(buf);
    }
    json manifest{{"inputs", inputs}, {"targets", targets}};
    write_text_file((fs::path(dir) / manifest_name).string(), manifest.dump(2) + "\n");
}

} // namespace quantcal
