#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "feathernet/model.hpp"
#include "feathernet/rng.hpp"

namespace feathernet {

struct GradCheckOptions {
    std::uint64_t seed = 1;
    std::size_t configs = 5;  // random configurations per target
    double step = 1e-5;       // central-difference half step
    double floor = 1e-3;      // denominator floor of the relative error
    double tolerance = 1e-5;

    // 32-bit backward passes are compared against 64-bit numeric gradients.
    static GradCheckOptions single_precision() {
        GradCheckOptions o;
        o.tolerance = 1e-3;
        return o;
    }
};

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor);

template <typename Scalar>
using ForwardFn = std::function<Tensor<Scalar>()>;
// Given dL/d(output), returns dL/d(each wrt tensor), flattened, in order.
template <typename Scalar>
using BackwardFn = std::function<std::vector<VectorX<Scalar>>(const Tensor<Scalar>& grad_output)>;

struct GradientError {
    double max_rel_error = 0.0;
    std::size_t checked = 0;  // elements compared
    std::size_t kinks = 0;    // elements skipped: estimate unstable under step refinement
};

struct GradientSample {
    std::vector<double> analytic;  // backward, all wrt tensors concatenated
    std::vector<double> numeric;   // central differences (empty unless requested)
    std::vector<char> kink;        // estimate did not settle under step refinement
};

// Analytic gradients of L = sum(forward() * R) for a random R, and optionally
// their central-difference estimates. Refines the step where the estimate
// disagrees with backward, to tell kinks from wrong gradients.
template <typename Scalar>
GradientSample gradient_sample(const std::vector<Tensor<Scalar>*>& wrt, const ForwardFn<Scalar>& forward,
                               const BackwardFn<Scalar>& backward, Rng& rng, const GradCheckOptions& options,
                               bool numeric = true);

// Max relative error of analytic against the reference numeric gradients, kinks skipped.
GradientError compare_gradients(const std::vector<double>& analytic, const GradientSample& reference, double floor);

// Compares backward against central differences of L = sum(forward() * R)
// for a random R, perturbing every element of every tensor in wrt. Elements
// whose estimate does not settle as the step shrinks straddle a kink and are
// counted separately instead of compared.
template <typename Scalar>
GradientError max_gradient_error(const std::vector<Tensor<Scalar>*>& wrt, const ForwardFn<Scalar>& forward,
                                 const BackwardFn<Scalar>& backward, Rng& rng, const GradCheckOptions& options);

struct GradCheckReport {
    std::string target;
    std::size_t configs = 0;
    double max_rel_error = 0.0;
    std::string worst_config;
    double tolerance = 0.0;
    std::size_t checked = 0;
    std::size_t kinks = 0;

    // Kink skips must stay rare, otherwise the comparison proves little.
    bool passed() const { return max_rel_error < tolerance && kinks * 100 <= checked; }
};

// Primitives, blocks and tiny end-to-end models, in suite order.
const std::vector<std::string>& gradcheck_targets();
// The leading primitive-op subset of gradcheck_targets().
std::vector<std::string> gradcheck_primitives();

template <typename Scalar = double>
GradCheckReport gradcheck_target(const std::string& target, const GradCheckOptions& options = {});

template <typename Scalar = double>
std::vector<GradCheckReport> gradcheck_suite(const GradCheckOptions& options = {});

// 8x8 input, widths <= 4: stem, one down-sampling block, one BlockA, streaming.
ArchSpec tiny_arch(Variant variant, HeadKind head);

}  // namespace feathernet
