#include "evagc/agcn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "evagc/errors.hpp"
#include "evagc/rng.hpp"

namespace evagc {

double gmm_weight(const std::array<double, 2>& z, const GmmKernelParams& params, int channel) {
    if (channel < 0 || channel >= params.mixing.rows())
        throw ValidationError("gmm_weight: channel out of range");
    double w = 0.0;
    for (int k = 0; k < params.num_kernels; ++k) {
        double q = 0.0;
        for (int c = 0; c < 2; ++c) {
            const double diff = z[c] - params.means(k, c);
            q += diff * diff * std::exp(-params.log_diag_cov(k, c));
        }
        w += params.mixing(channel, k) * std::exp(-0.5 * q);
    }
    return w;
}

namespace {

void check_layer_shapes(const AbsorbingGraph& graph, const Matrix& h_in,
                        const AgcnLayerParams& layer) {
    const int nodes = graph.num_event_nodes + 1;
    if (h_in.rows() != nodes)
        throw ValidationError("layer_forward: expected " + std::to_string(nodes) +
                              " feature rows, got " + std::to_string(h_in.rows()));
    if (h_in.cols() != layer.in_dim())
        throw ValidationError("layer_forward: feature width " + std::to_string(h_in.cols()) +
                              " != transform in_dim " + std::to_string(layer.in_dim()));
    if (layer.kernel.mixing.rows() != layer.out_dim() ||
        layer.kernel.mixing.cols() != layer.kernel.num_kernels)
        throw ValidationError("layer_forward: mixing shape mismatch");
}

// Gaussian basis values for every degree group of the plan: out(g, k).
Matrix group_basis(const MessagePlan& plan, const GmmKernelParams& kernel) {
    const int groups = static_cast<int>(plan.group_z.size());
    Matrix basis(groups, kernel.num_kernels);
    for (int g = 0; g < groups; ++g) {
        const auto& z = plan.group_z[g];
        for (int k = 0; k < kernel.num_kernels; ++k) {
            double q = 0.0;
            for (int c = 0; c < 2; ++c) {
                const double diff = z[c] - kernel.means(k, c);
                q += diff * diff * std::exp(-kernel.log_diag_cov(k, c));
            }
            basis(g, k) = std::exp(-0.5 * q);
        }
    }
    return basis;
}

} // namespace

Matrix layer_forward(const AbsorbingGraph& graph, const Matrix& h_in,
                     const AgcnLayerParams& layer, Activation activation, LayerCache* cache) {
    check_layer_shapes(graph, h_in, layer);
    const MessagePlan& plan = graph.message_plan();
    const int nodes = graph.num_event_nodes + 1;
    const int d_out = layer.out_dim();
    const int f_in = layer.in_dim();

    Matrix transformed(nodes, d_out);
    for (int u = 0; u < nodes; ++u) {
        const double* h = h_in.row(u);
        double* m = transformed.row(u);
        for (int d = 0; d < d_out; ++d) {
            const double* th = layer.transform.row(d);
            double s = 0.0;
            for (int f = 0; f < f_in; ++f) s += th[f] * h[f];
            m[d] = s;
        }
    }

    Matrix basis = group_basis(plan, layer.kernel);
    const int groups = basis.rows();
    Matrix w(groups, d_out);
    for (int g = 0; g < groups; ++g) {
        for (int d = 0; d < d_out; ++d) {
            const double* alpha = layer.kernel.mixing.row(d);
            double s = 0.0;
            for (int k = 0; k < layer.kernel.num_kernels; ++k) s += alpha[k] * basis(g, k);
            w(g, d) = s;
        }
    }

    Matrix pre(nodes, d_out, 0.0);
    for (std::size_t p = 0; p < plan.pairs(); ++p) {
        double* acc = pre.row(plan.recv[p]);
        const double* m = transformed.row(plan.send[p]);
        const double* wg = w.row(plan.group[p]);
        for (int d = 0; d < d_out; ++d) acc[d] += wg[d] * m[d];
    }

    Matrix out = pre;
    if (activation == Activation::Relu) {
        for (int u = 0; u < nodes; ++u) {
            double* o = out.row(u);
            for (int d = 0; d < d_out; ++d) o[d] = o[d] > 0.0 ? o[d] : 0.0;
        }
    }

    if (cache) {
        cache->transformed = std::move(transformed);
        cache->pre = std::move(pre);
        cache->group_basis = std::move(basis);
        cache->group_w = std::move(w);
    }
    return out;
}

Matrix agcn_forward(const AbsorbingGraph& graph, const Matrix& x, const AgcnParams& params,
                    AgcnCache* cache) {
    if (params.blocks.empty()) throw ValidationError("agcn_forward: no blocks");
    for (int b = 0; b + 1 < params.num_blocks(); ++b) {
        if (params.blocks[b].out_dim() != params.blocks[b + 1].in_dim())
            throw ValidationError("agcn_forward: dim chain broken at block " + std::to_string(b));
    }
    if (params.num_blocks() >= 2 &&
        params.blocks.front().out_dim() != params.blocks.back().out_dim())
        throw ValidationError("agcn_forward: residual requires equal first/last out_dim");

    if (cache) {
        cache->states.clear();
        cache->layers.resize(params.blocks.size());
        cache->states.push_back(x);
    }
    Matrix h = x;
    Matrix h1;
    for (int b = 0; b < params.num_blocks(); ++b) {
        h = layer_forward(graph, h, params.blocks[b], params.activation,
                          cache ? &cache->layers[b] : nullptr);
        if (b == 0) h1 = h;
        if (cache) cache->states.push_back(h);
    }
    if (params.num_blocks() >= 2) h.add_scaled(h1, 1.0);
    return h;
}

AgcnGrads AgcnGrads::zeros_like(const AgcnParams& params) {
    AgcnGrads g;
    g.blocks.reserve(params.blocks.size());
    for (const auto& b : params.blocks) {
        AgcnLayerGrads lg;
        lg.means = Matrix(b.kernel.means.rows(), 2);
        lg.log_diag_cov = Matrix(b.kernel.log_diag_cov.rows(), 2);
        lg.mixing = Matrix(b.kernel.mixing.rows(), b.kernel.mixing.cols());
        lg.transform = Matrix(b.transform.rows(), b.transform.cols());
        g.blocks.push_back(std::move(lg));
    }
    return g;
}

void AgcnGrads::accumulate(const AgcnGrads& other) {
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        blocks[b].means.add_scaled(other.blocks[b].means, 1.0);
        blocks[b].log_diag_cov.add_scaled(other.blocks[b].log_diag_cov, 1.0);
        blocks[b].mixing.add_scaled(other.blocks[b].mixing, 1.0);
        blocks[b].transform.add_scaled(other.blocks[b].transform, 1.0);
    }
}

namespace {

// Backward through one layer. g_out is dL/d(block output); returns
// dL/d(block input) and adds this layer's parameter gradients.
Matrix layer_backward(const AbsorbingGraph& graph, const AgcnLayerParams& layer,
                      Activation activation, const Matrix& h_in, const LayerCache& cache,
                      const Matrix& g_out, AgcnLayerGrads& grads) {
    const MessagePlan& plan = graph.message_plan();
    const int nodes = graph.num_event_nodes + 1;
    const int d_out = layer.out_dim();
    const int f_in = layer.in_dim();
    const int groups = cache.group_w.rows();
    const int kg = layer.kernel.num_kernels;

    Matrix delta = g_out;
    if (activation == Activation::Relu) {
        for (int u = 0; u < nodes; ++u) {
            double* row = delta.row(u);
            const double* pre = cache.pre.row(u);
            for (int d = 0; d < d_out; ++d)
                if (pre[d] <= 0.0) row[d] = 0.0;
        }
    }

    // Per-group kernel sensitivity S(g,d) = sum over the group's directed
    // pairs of delta[recv,d] * m[send,d]; message gradient on the senders.
    Matrix s(groups, d_out, 0.0);
    Matrix gm(nodes, d_out, 0.0);
    for (std::size_t p = 0; p < plan.pairs(); ++p) {
        const double* dl = delta.row(plan.recv[p]);
        const double* m = cache.transformed.row(plan.send[p]);
        const double* wg = cache.group_w.row(plan.group[p]);
        double* srow = s.row(plan.group[p]);
        double* gmrow = gm.row(plan.send[p]);
        for (int d = 0; d < d_out; ++d) {
            srow[d] += dl[d] * m[d];
            gmrow[d] += wg[d] * dl[d];
        }
    }

    for (int g = 0; g < groups; ++g) {
        const auto& z = graph.message_plan().group_z[g];
        const double* srow = s.row(g);
        for (int k = 0; k < kg; ++k) {
            const double e = cache.group_basis(g, k);
            double mix_sens = 0.0;  // sum_d S(g,d) * alpha(d,k)
            for (int d = 0; d < d_out; ++d) {
                grads.mixing(d, k) += srow[d] * e;
                mix_sens += srow[d] * layer.kernel.mixing(d, k);
            }
            const double common = mix_sens * e;
            for (int c = 0; c < 2; ++c) {
                const double diff = z[c] - layer.kernel.means(k, c);
                const double inv_var = std::exp(-layer.kernel.log_diag_cov(k, c));
                grads.means(k, c) += common * diff * inv_var;
                grads.log_diag_cov(k, c) += common * 0.5 * diff * diff * inv_var;
            }
        }
    }

    Matrix g_in(nodes, f_in, 0.0);
    for (int u = 0; u < nodes; ++u) {
        const double* gmrow = gm.row(u);
        const double* h = h_in.row(u);
        double* gi = g_in.row(u);
        for (int d = 0; d < d_out; ++d) {
            const double gmd = gmrow[d];
            if (gmd == 0.0) continue;
            const double* th = layer.transform.row(d);
            double* gt = grads.transform.row(d);
            for (int f = 0; f < f_in; ++f) {
                gt[f] += gmd * h[f];
                gi[f] += gmd * th[f];
            }
        }
    }
    return g_in;
}

} // namespace

AgcnGrads agcn_backward(const AbsorbingGraph& graph, const AgcnParams& params,
                        const AgcnCache& cache, const Matrix& upstream, Matrix* input_grad) {
    const int b_count = params.num_blocks();
    if (cache.states.size() != static_cast<std::size_t>(b_count) + 1)
        throw ValidationError("agcn_backward: forward cache missing or stale");

    AgcnGrads grads = AgcnGrads::zeros_like(params);
    Matrix g = upstream;
    for (int b = b_count - 1; b >= 1; --b) {
        g = layer_backward(graph, params.blocks[b], params.activation, cache.states[b],
                           cache.layers[b], g, grads.blocks[b]);
    }
    if (b_count >= 2) g.add_scaled(upstream, 1.0);  // residual tap into H_1
    Matrix gx = layer_backward(graph, params.blocks[0], params.activation, cache.states[0],
                               cache.layers[0], g, grads.blocks[0]);
    if (input_grad) *input_grad = std::move(gx);
    return grads;
}

AgcnParams init_agcn_params(int in_dim, int hidden_dim, int num_blocks, int num_kernels,
                            std::uint64_t seed) {
    if (in_dim < 1 || hidden_dim < 1 || num_blocks < 1 || num_kernels < 1)
        throw ValidationError("init_agcn_params: all dims must be >= 1");
    Rng rng(mix_seed(seed, 0xA6C4));
    AgcnParams params;
    for (int b = 0; b < num_blocks; ++b) {
        const int f_in = b == 0 ? in_dim : hidden_dim;
        AgcnLayerParams layer;
        layer.kernel.num_kernels = num_kernels;
        layer.kernel.means = Matrix(num_kernels, 2);
        for (int k = 0; k < num_kernels; ++k)
            for (int c = 0; c < 2; ++c) layer.kernel.means(k, c) = rng.unit();
        layer.kernel.log_diag_cov = Matrix(num_kernels, 2, 0.0);
        layer.kernel.mixing = Matrix(hidden_dim, num_kernels);
        const double alpha_sd = 1.0 / std::sqrt(static_cast<double>(num_kernels));
        for (int d = 0; d < hidden_dim; ++d)
            for (int k = 0; k < num_kernels; ++k)
                layer.kernel.mixing(d, k) = alpha_sd * rng.gauss();
        layer.transform = Matrix(hidden_dim, f_in);
        const double theta_sd = 1.0 / std::sqrt(static_cast<double>(f_in));
        for (int d = 0; d < hidden_dim; ++d)
            for (int f = 0; f < f_in; ++f) layer.transform(d, f) = theta_sd * rng.gauss();
        params.blocks.push_back(std::move(layer));
    }
    return params;
}

TensorRefs collect_tensors(AgcnParams& params, const std::string& prefix) {
    TensorRefs refs;
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        auto& blk = params.blocks[b];
        const std::string base = prefix + ".block" + std::to_string(b) + ".";
        refs.push_back({base + "mu", blk.kernel.means.data(), blk.kernel.means.size()});
        refs.push_back(
            {base + "log_sigma", blk.kernel.log_diag_cov.data(), blk.kernel.log_diag_cov.size()});
        refs.push_back({base + "alpha", blk.kernel.mixing.data(), blk.kernel.mixing.size()});
        refs.push_back({base + "theta", blk.transform.data(), blk.transform.size()});
    }
    return refs;
}

TensorRefs collect_tensors(AgcnGrads& grads, const std::string& prefix) {
    TensorRefs refs;
    for (std::size_t b = 0; b < grads.blocks.size(); ++b) {
        auto& blk = grads.blocks[b];
        const std::string base = prefix + ".block" + std::to_string(b) + ".";
        refs.push_back({base + "mu", blk.means.data(), blk.means.size()});
        refs.push_back({base + "log_sigma", blk.log_diag_cov.data(), blk.log_diag_cov.size()});
        refs.push_back({base + "alpha", blk.mixing.data(), blk.mixing.size()});
        refs.push_back({base + "theta", blk.transform.data(), blk.transform.size()});
    }
    return refs;
}

bool GradCheckReport::passed() const {
    for (const auto& g : groups)
        if (g.max_rel_err >= tolerance) return false;
    return true;
}

double GradCheckReport::max_rel_err() const {
    double m = 0.0;
    for (const auto& g : groups) m = std::max(m, g.max_rel_err);
    return m;
}

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    for (const auto& g : groups) {
        os << g.name << ": max_rel_err=" << g.max_rel_err << " checked=" << g.checked
           << " skipped=" << g.skipped << (g.max_rel_err < tolerance ? " ok" : " FAIL") << '\n';
    }
    return os.str();
}

namespace {

double contract(const Matrix& out, const Matrix& weights) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out.data()[i] * weights.data()[i];
    return s;
}

// True when the +/- perturbed passes land on different sides of a ReLU
// kink, or within 10*eps of one, for any pre-activation the perturbation
// actually moved. Entries the coordinate does not touch (e.g. the exact
// zeros fed by the absorbing node's empty input) are benign and ignored.
bool straddles_kink(const Matrix& pre_plus, const Matrix& pre_minus, double eps) {
    for (std::size_t i = 0; i < pre_plus.size(); ++i) {
        const double p = pre_plus.data()[i];
        const double m = pre_minus.data()[i];
        if (p == m) continue;
        if ((p > 0.0) != (m > 0.0)) return true;
        if (std::min(std::fabs(p), std::fabs(m)) < 10.0 * eps) return true;
    }
    return false;
}

bool straddles_kink(const AgcnCache& plus, const AgcnCache& minus, double eps) {
    for (std::size_t l = 0; l < plus.layers.size(); ++l)
        if (straddles_kink(plus.layers[l].pre, minus.layers[l].pre, eps)) return true;
    return false;
}

} // namespace

GradCheckReport gradient_check(const AbsorbingGraph& graph, const Matrix& x,
                               const AgcnParams& params, const GradCheckOptions& options) {
    AgcnParams work = params;

    AgcnCache cache;
    Matrix out = agcn_forward(graph, x, work, &cache);

    Rng rng(mix_seed(options.seed, 0x6C));
    Matrix upstream(out.rows(), out.cols());
    for (std::size_t i = 0; i < upstream.size(); ++i) upstream.data()[i] = rng.range(-1.0, 1.0);

    AgcnGrads analytic = agcn_backward(graph, work, cache, upstream);
    TensorRefs grad_refs = collect_tensors(analytic, "agcn");
    TensorRefs param_refs = collect_tensors(work, "agcn");

    if (options.corrupt_mixing) {
        // Inflate the largest-magnitude alpha gradient by 10% so the check
        // demonstrably catches a wrong backward pass.
        double* worst = nullptr;
        double best = -1.0;
        for (auto& ref : grad_refs) {
            if (ref.name.find("alpha") == std::string::npos) continue;
            for (std::size_t i = 0; i < ref.size; ++i)
                if (std::fabs(ref.data[i]) > best) {
                    best = std::fabs(ref.data[i]);
                    worst = &ref.data[i];
                }
        }
        if (worst) *worst *= 1.1;
    }

    const double eps = options.epsilon;
    GradCheckReport report;
    report.tolerance = options.tolerance;
    for (std::size_t r = 0; r < param_refs.size(); ++r) {
        GradCheckGroup group;
        group.name = param_refs[r].name;
        for (std::size_t i = 0; i < param_refs[r].size; ++i) {
            double& coord = param_refs[r].data[i];
            const double saved = coord;

            coord = saved + eps;
            AgcnCache c_plus;
            const double l_plus = contract(agcn_forward(graph, x, work, &c_plus), upstream);
            coord = saved - eps;
            AgcnCache c_minus;
            const double l_minus = contract(agcn_forward(graph, x, work, &c_minus), upstream);
            coord = saved;

            if (work.activation == Activation::Relu && straddles_kink(c_plus, c_minus, eps)) {
                ++group.skipped;
                continue;
            }
            const double fd = (l_plus - l_minus) / (2.0 * eps);
            const double ga = grad_refs[r].data[i];
            const double rel =
                std::fabs(ga - fd) / std::max({1e-2, std::fabs(ga), std::fabs(fd)});
            group.max_rel_err = std::max(group.max_rel_err, rel);
            ++group.checked;
        }
        report.groups.push_back(std::move(group));
    }
    return report;
}

} // namespace evagc
