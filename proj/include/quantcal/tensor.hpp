#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace quantcal {

// Dense row-major f64 tensor. Contents are validated (finite) at construction
// and immutable afterwards.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, std::vector<double> values);

    static Tensor zeros(std::vector<std::size_t> shape);

    const std::vector<std::size_t>& shape() const { return shape_; }
    const std::vector<double>& values() const { return values_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> values_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_to_string(const std::vector<std::size_t>& shape);

Tensor tensor_create(std::vector<std::size_t> shape, std::vector<double> values);

double reduce_abs_max(const Tensor& t);

// Mean squared error over all elements; shapes must match.
double mse(const Tensor& a, const Tensor& b);

// Binary tensor file ("QCT1"): magic, u32 LE rank, u32 LE dims, f32 LE values.
// Values are widened to f64 on load.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

} // namespace quantcal
