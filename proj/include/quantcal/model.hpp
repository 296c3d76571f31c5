#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "quantcal/calib.hpp"
#include "quantcal/quant.hpp"
#include "quantcal/tensor.hpp"

namespace quantcal {

enum class LayerKind { Linear, Conv1d, LayerNorm, ReLU, GELU };

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_string(const std::string& s);

// Linear consumes the flattened input: W is [out, in] with in == numel of the
// input shape. Conv1d maps [C_in, L] -> [C_out, L_out] with W [C_out, C_in, k].
// LayerNorm normalizes over the last dimension with affine weight/bias [d].
struct LayerSpec {
    LayerKind kind = LayerKind::Linear;
    std::string name;
    Tensor weight;
    Tensor bias;
    int stride = 1;
    int padding = 0;
    double eps = 1e-5;
};

// Quantized layers are those whose inputs get fake-quantized in forward_quant:
// Linear, Conv1d and LayerNorm.
bool layer_is_quantized(LayerKind k);

struct ForwardResult {
    Tensor output;
    std::vector<Tensor> activations; // input of each quantized layer, in order
};

// Per-quantized-layer activation scales, all positive.
struct ScaleVector {
    std::vector<double> scales;
    int bits = 8;
    std::size_t size() const { return scales.size(); }
};

// Weight quantization is fixed at load time: per-tensor Max range on each
// quantized layer's W (an all-zero W falls back to beta = 1e-8). The
// fake-quantized weights are cached so forward_quant does not recompute them.
struct QuantConfig {
    int weight_bits = 8;
    int act_bits = 8;
    std::vector<QuantParams> weight_params;
    std::vector<Tensor> fq_weights;
    std::vector<std::string> warnings;
};

class ModelGraph {
public:
    static ModelGraph build(std::vector<std::size_t> input_shape,
                            std::vector<LayerSpec> layers);
    static ModelGraph load(const std::string& manifest_path);

    const std::vector<std::size_t>& input_shape() const { return input_shape_; }
    const std::vector<LayerSpec>& layers() const { return layers_; }
    const std::vector<std::size_t>& quantized_indices() const { return quantized_; }
    std::size_t num_quantized() const { return quantized_.size(); }
    const std::vector<std::size_t>& output_shape() const { return output_shape_; }

    ForwardResult forward_fp(const Tensor& x) const;
    Tensor forward_quant(const Tensor& x, const ScaleVector& s,
                         const QuantConfig& qc) const;

private:
    std::vector<std::size_t> input_shape_;
    std::vector<std::size_t> output_shape_;
    std::vector<LayerSpec> layers_;
    std::vector<std::size_t> quantized_;
};

std::vector<std::size_t> layer_output_shape(const LayerSpec& layer,
                                            const std::vector<std::size_t>& in_shape);
Tensor layer_forward(const LayerSpec& layer, const Tensor& input);

QuantConfig make_quant_config(const ModelGraph& g, int weight_bits, int act_bits);

// Concatenated full-precision input activations of each quantized layer over
// the whole calibration set (one tensor per layer, sample-major).
std::vector<Tensor> collect_activations(const ModelGraph& g,
                                        const CalibrationSet& cal);

// Empirical CDF of |activation| / abs_max for one quantized layer, downsampled
// to at most 1000 (value, cumulative_fraction) points ending at (1, 1).
std::vector<std::pair<double, double>> activation_cdf(const ModelGraph& g,
                                                      const CalibrationSet& cal,
                                                      const std::string& layer_name);

// Model manifest: {"input_shape": [...], "layers": [{"kind", "name", "hyper",
// "weights": {"W": path, "b": path}}]}; tensor paths are relative to the
// manifest. save_model writes the weight files next to it under weights/.
void save_model(const ModelGraph& g, const std::string& dir,
                const std::string& manifest_name = "model.json");

// Calibration set manifest: {"inputs": [paths], "targets": [paths]}.
CalibrationSet load_calibration_set(const std::string& manifest_path);
void save_calibration_set(const CalibrationSet& cal, const std::string& dir,
                          const std::string& manifest_name);

} // namespace quantcal
