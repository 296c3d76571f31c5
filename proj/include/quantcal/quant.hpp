#pragma once

#include <cstdint>
#include <vector>

#include "quantcal/tensor.hpp"

#include <json.hpp>

namespace quantcal {

// Uniform symmetric quantization parameters: alpha = -beta, zero_point = 0,
// scale = 2*beta / (2^bits - 1).
struct QuantParams {
    double alpha = 0.0;
    double beta = 0.0;
    int bits = 8;
    double scale = 0.0;
    int zero_point = 0;
};

int64_t quant_min(int bits);
int64_t quant_max(int bits);

// beta > 0 and finite, bits in [2, 16].
QuantParams scale_from_range(double beta, int bits);

// Inverse of scale_from_range on the scale field: beta = scale * (2^bits - 1) / 2.
double beta_from_scale(double scale, int bits);

// Builds params whose scale field is exactly `scale` (beta derived from it).
// Used on the forward path where the scale vector is the source of truth.
QuantParams params_from_scale(double scale, int bits);

struct IntTensor {
    IntTensor() = default;
    IntTensor(std::vector<std::size_t> shape, std::vector<int32_t> values, int bits);

    std::vector<std::size_t> shape;
    std::vector<int32_t> values;
    int bits = 8;
};

// Round-half-to-even, then clamp to [-2^(bits-1), 2^(bits-1)-1].
IntTensor quantize(const Tensor& t, const QuantParams& p);
Tensor dequantize(const IntTensor& q, const QuantParams& p);
Tensor fake_quantize(const Tensor& t, const QuantParams& p);
double fake_quantize_value(double v, const QuantParams& p);

void to_json(nlohmann::json& j, const QuantParams& p);
void from_json(const nlohmann::json& j, QuantParams& p);

} // namespace quantcal
