#ifndef EVAGC_AGCN_HPP
#define EVAGC_AGCN_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "evagc/graph.hpp"
#include "evagc/matrix.hpp"
#include "evagc/tensor_ref.hpp"

namespace evagc {

// One Gaussian-mixture edge kernel: omega_d(z) = sum_k alpha[d,k] *
// exp(-1/2 (z-mu_k)^T diag(exp(log_diag_cov_k))^-1 (z-mu_k)).
// Means and covariances are shared across output channels; the mixing
// weights are per channel.
struct GmmKernelParams {
    int num_kernels = 0;  // K_g
    Matrix means;         // K_g x 2
    Matrix log_diag_cov;  // K_g x 2, log-parameterized to stay positive
    Matrix mixing;        // D x K_g
};

struct AgcnLayerParams {
    GmmKernelParams kernel;
    Matrix transform;  // D x F_in; message to channel d is omega_d * (transform h)_d

    int in_dim() const { return transform.cols(); }
    int out_dim() const { return transform.rows(); }
};

// Identity is a test hook (it makes the map linear in each parameter block,
// so finite differences are exact); the model always runs Relu.
enum class Activation { Relu, Identity };

struct AgcnParams {
    std::vector<AgcnLayerParams> blocks;
    Activation activation = Activation::Relu;

    int num_blocks() const { return static_cast<int>(blocks.size()); }
    int in_dim() const { return blocks.front().in_dim(); }
    int out_dim() const { return blocks.back().out_dim(); }
};

double gmm_weight(const std::array<double, 2>& z, const GmmKernelParams& params, int channel);

// Everything the backward pass needs from one layer's forward evaluation.
struct LayerCache {
    Matrix transformed;  // (M+1) x D, rows are transform * h_in
    Matrix pre;          // (M+1) x D pre-activation sums
    Matrix group_basis;  // G x K_g Gaussian basis values per degree group
    Matrix group_w;      // G x D mixed kernel weights per degree group
};

struct AgcnCache {
    std::vector<Matrix> states;      // states[0] = input, states[b] = block b output
    std::vector<LayerCache> layers;  // one per block
};

Matrix layer_forward(const AbsorbingGraph& graph, const Matrix& h_in,
                     const AgcnLayerParams& layer, Activation activation,
                     LayerCache* cache = nullptr);

// Stacked blocks with the first-to-last residual: output = H_B + H_1 for
// B >= 2, H_1 otherwise. Pass a cache to enable agcn_backward.
Matrix agcn_forward(const AbsorbingGraph& graph, const Matrix& x, const AgcnParams& params,
                    AgcnCache* cache = nullptr);

struct AgcnLayerGrads {
    Matrix means, log_diag_cov, mixing, transform;
};

struct AgcnGrads {
    std::vector<AgcnLayerGrads> blocks;

    static AgcnGrads zeros_like(const AgcnParams& params);
    void accumulate(const AgcnGrads& other);
};

// Analytic gradients of agcn_forward contracted with `upstream`
// ((M+1) x D). ReLU uses subgradient 0 at exactly 0. Fills input_grad
// ((M+1) x F_in) when given.
AgcnGrads agcn_backward(const AbsorbingGraph& graph, const AgcnParams& params,
                        const AgcnCache& cache, const Matrix& upstream,
                        Matrix* input_grad = nullptr);

// Means uniform in [0,1]^2 (pseudo-coordinates live in (0,1]), unit
// covariances, mixing/transform zero-mean with 1/fan-in variance.
AgcnParams init_agcn_params(int in_dim, int hidden_dim, int num_blocks, int num_kernels,
                            std::uint64_t seed);

TensorRefs collect_tensors(AgcnParams& params, const std::string& prefix);
TensorRefs collect_tensors(AgcnGrads& grads, const std::string& prefix);

struct GradCheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    int checked = 0;
    int skipped = 0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double tolerance = 0.0;

    bool passed() const;
    double max_rel_err() const;
    std::string summary() const;
};

struct GradCheckOptions {
    double epsilon = 1e-5;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;       // draws the upstream contraction weights
    bool corrupt_mixing = false;  // mutation hook: inflate one alpha gradient by 10%
};

// Central finite differences over every parameter coordinate against the
// analytic backward pass. Coordinates whose perturbed forward passes leave
// a ReLU pre-activation within 10*epsilon of zero are skipped (kink).
GradCheckReport gradient_check(const AbsorbingGraph& graph, const Matrix& x,
                               const AgcnParams& params, const GradCheckOptions& options);

} // namespace evagc

#endif
