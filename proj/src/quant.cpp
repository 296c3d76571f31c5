#include "quantcal/quant.hpp"

#include <algorithm>
#include <cmath>

namespace quantcal {

namespace {

void check_bits(int bits) {
    if (bits < 2 || bits > 16)
        throw std::invalid_argument("bits must be in [2, 16], got " +
                                    std::to_string(bits));
}

double levels(int bits) {
    return static_cast<double>((1 << bits) - 1);
}

} // namespace

int64_t quant_min(int bits) { return -(int64_t(1) << (bits - 1)); }
int64_t quant_max(int bits) { return (int64_t(1) << (bits - 1)) - 1; }

QuantParams scale_from_range(double beta, int bits) {
    check_bits(bits);
    if (!std::isfinite(beta) || beta <= 0.0)
        throw std::invalid_argument("beta must be positive and finite, got " +
                                    std::to_string(beta));
    QuantParams p;
    p.bits = bits;
    p.scale = (2.0 * beta) / levels(bits);
    // Store the range implied by the rounded scale (<= 1 ulp from the
    // request) so that scale * (2^bits - 1) == 2 * beta holds exactly.
    p.beta = beta_from_scale(p.scale, bits);
    p.alpha = -p.beta;
    p.zero_point = 0;
    return p;
}

double beta_from_scale(double scale, int bits) {
    check_bits(bits);
    return scale * levels(bits) / 2.0;
}

QuantParams params_from_scale(double scale, int bits) {
    check_bits(bits);
    if (!std::isfinite(scale) || scale <= 0.0)
        throw std::invalid_argument("scale must be positive and finite, got " +
                                    std::to_string(scale));
    QuantParams p;
    p.scale = scale;
    p.bits = bits;
    p.beta = beta_from_scale(scale, bits);
    p.alpha = -p.beta;
    p.zero_point = 0;
    return p;
}

IntTensor::IntTensor(std::vector<std::size_t> shape, std::vector<int32_t> values,
                     int bits_)
    : shape(std::move(shape)), values(std::move(values)), bits(bits_) {
    check_bits(bits);
    if (shape_numel(this->shape) != this->values.size())
        throw std::invalid_argument("int tensor shape/value count mismatch");
    const int64_t lo = quant_min(bits), hi = quant_max(bits);
    for (int32_t v : this->values)
        if (v < lo || v > hi)
            throw std::invalid_argument("quantized value " + std::to_string(v) +
                                        " out of range for " + std::to_string(bits) +
                                        " bits");
}

IntTensor quantize(const Tensor& t, const QuantParams& p) {
    check_bits(p.bits);
    if (!(p.scale > 0.0) || !std::isfinite(p.scale))
        throw std::invalid_argument("quantize needs a positive finite scale");
    const double lo = static_cast<double>(quant_min(p.bits));
    const double hi = static_cast<double>(quant_max(p.bits));
    std::vector<int32_t> q(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        // nearbyint rounds half to even under the default FP environment
        double r = std::nearbyint(t[i] / p.scale);
        q[i] = static_cast<int32_t>(std::clamp(r, lo, hi));
    }
    return IntTensor(t.shape(), std::move(q), p.bits);
}

Tensor dequantize(const IntTensor& q, const QuantParams& p) {
    if (q.bits != p.bits)
        throw std::invalid_argument("bit width mismatch between tensor and params");
    std::vector<double> v(q.values.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = (static_cast<double>(q.values[i]) + p.zero_point) * p.scale;
    return Tensor(q.shape, std::move(v));
}

double fake_quantize_value(double v, const QuantParams& p) {
    const double lo = static_cast<double>(quant_min(p.bits));
    const double hi = static_cast<double>(quant_max(p.bits));
    return std::clamp(std::nearbyint(v / p.scale), lo, hi) * p.scale;
}

Tensor fake_quantize(const Tensor& t, const QuantParams& p) {
    check_bits(p.bits);
    if (!(p.scale > 0.0) || !std::isfinite(p.scale))
        throw std::invalid_argument("fake_quantize needs a positive finite scale");
    std::vector<double> v(t.size());
    for (std::size_t i = 0; i < t.size(); ++i)
        v[i] = fake_quantize_value(t[i], p);
    return Tensor(t.shape(), std::move(v));
}

void to_json(nlohmann::json& j, const QuantParams& p) {
    j = nlohmann::json{{"beta", p.beta}, {"bits", p.bits}};
}

void from_json(const nlohmann::json& j, QuantParams& p) {
    double beta = j.at("beta").get<double>();
    int bits = j.at("bits").get<int>();
    p = scale_from_range(beta, bits);
}

} // namespace quantcal
