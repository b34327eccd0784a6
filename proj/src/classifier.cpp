#include "evagc/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "evagc/errors.hpp"
#include "evagc/parallel.hpp"
#include "evagc/rng.hpp"

namespace evagc {

namespace {
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// seed stream tags
constexpr std::uint64_t kSeedInit = 0x11;
constexpr std::uint64_t kSeedShuffle = 0x22;
constexpr std::uint64_t kSeedDropout = 0x33;
} // namespace

BranchMode branch_mode_from_string(const std::string& s) {
    if (s == "dual") return BranchMode::Dual;
    if (s == "point_only") return BranchMode::PointOnly;
    if (s == "voxel_only") return BranchMode::VoxelOnly;
    throw ValidationError("unknown branch mode '" + s + "'");
}

std::string to_string(BranchMode m) {
    switch (m) {
        case BranchMode::Dual: return "dual";
        case BranchMode::PointOnly: return "point_only";
        case BranchMode::VoxelOnly: return "voxel_only";
    }
    return "?";
}

int ModelParams::concat_dim() const {
    int w = 0;
    if (uses_points()) w += dims.hidden_dim;
    if (uses_voxels()) w += dims.hidden_dim;
    return w;
}

ModelParams init_model(const ModelDims& dims, BranchMode branch_mode, Readout readout,
                       int num_classes, double dropout, std::uint64_t seed) {
    if (num_classes < 2) throw ValidationError("init_model: num_classes must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("init_model: dropout in [0,1)");
    ModelParams model;
    model.branch_mode = branch_mode;
    model.readout = readout;
    model.dims = dims;
    model.dropout = dropout;
    model.num_classes = num_classes;
    if (model.uses_points())
        model.point_branch = init_agcn_params(dims.point_in_dim, dims.hidden_dim,
                                              dims.num_blocks, dims.num_kernels,
                                              mix_seed(seed, 1));
    if (model.uses_voxels())
        model.voxel_branch = init_agcn_params(dims.voxel_in_dim, dims.hidden_dim,
                                              dims.num_blocks, dims.num_kernels,
                                              mix_seed(seed, 2));

    Rng rng(mix_seed(seed, 3));
    const int w_in = model.concat_dim();
    HeadParams& head = model.head;
    head.w1 = Matrix(dims.head_hidden, w_in);
    const double sd1 = 1.0 / std::sqrt(static_cast<double>(w_in));
    for (std::size_t i = 0; i < head.w1.size(); ++i) head.w1.data()[i] = sd1 * rng.gauss();
    head.b1.assign(dims.head_hidden, 0.0);
    head.bn_gamma.assign(dims.head_hidden, 1.0);
    head.bn_beta.assign(dims.head_hidden, 0.0);
    head.bn_running_mean.assign(dims.head_hidden, 0.0);
    head.bn_running_var.assign(dims.head_hidden, 1.0);
    head.w2 = Matrix(num_classes, dims.head_hidden);
    const double sd2 = 1.0 / std::sqrt(static_cast<double>(dims.head_hidden));
    for (std::size_t i = 0; i < head.w2.size(); ++i) head.w2.data()[i] = sd2 * rng.gauss();
    head.b2.assign(num_classes, 0.0);
    return model;
}

namespace {

Matrix node_inputs(const AbsorbingGraph& graph) {
    const int m = graph.num_event_nodes;
    const int f = graph.feature_dim();
    Matrix x(m + 1, f, 0.0);  // absorbing row stays zero
    for (int u = 0; u < m; ++u)
        for (int c = 0; c < f; ++c) x(u, c) = graph.features(u, c);
    return x;
}

struct BranchEval {
    AgcnCache cache;
    Matrix output;             // (M+1) x D
    std::vector<double> readout;
    std::vector<int> argmax;   // MaxPool winners, one per channel
};

void branch_forward(const AbsorbingGraph& graph, const AgcnParams& params, Readout readout,
                    bool want_cache, BranchEval& eval) {
    if (graph.num_event_nodes < 1)
        throw ValidationError("branch_forward: graph has no event nodes");
    const Matrix x = node_inputs(graph);
    eval.output = agcn_forward(graph, x, params, want_cache ? &eval.cache : nullptr);
    const int d_out = eval.output.cols();
    const int m = graph.num_event_nodes;
    eval.readout.assign(d_out, 0.0);
    if (readout == Readout::Absorbing) {
        for (int d = 0; d < d_out; ++d) eval.readout[d] = eval.output(m, d);
    } else {
        eval.argmax.assign(d_out, 0);
        for (int d = 0; d < d_out; ++d) {
            double best = eval.output(0, d);
            int best_u = 0;
            for (int u = 1; u < m; ++u)
                if (eval.output(u, d) > best) {
                    best = eval.output(u, d);
                    best_u = u;
                }
            eval.readout[d] = best;
            eval.argmax[d] = best_u;
        }
    }
}

// Scatter the read-out gradient back onto the AGCN output rows.
Matrix readout_upstream(const BranchEval& eval, const AbsorbingGraph& graph, Readout readout,
                        const double* grad, int d_out) {
    Matrix up(graph.num_event_nodes + 1, d_out, 0.0);
    if (readout == Readout::Absorbing) {
        for (int d = 0; d < d_out; ++d) up(graph.num_event_nodes, d) = grad[d];
    } else {
        for (int d = 0; d < d_out; ++d) up(eval.argmax[d], d) = grad[d];
    }
    return up;
}

struct HeadCache {
    Matrix x;        // B x W
    Matrix a1;       // B x H pre-BN
    std::vector<double> mean, inv_std;
    Matrix xhat;     // B x H
    Matrix y;        // B x H post-BN (pre-ReLU)
    Matrix act;      // B x H post ReLU + dropout
    Matrix logp;     // B x C
};

// mask: nullptr disables dropout; otherwise entries are 0 or 1/(1-p).
Matrix head_forward(HeadParams& head, const Matrix& x, RunMode mode, bool update_running,
                    const Matrix* mask, HeadCache* cache) {
    const int b = x.rows();
    const int h = head.hidden_dim();
    const int classes = head.num_classes();
    if (x.cols() != head.in_dim())
        throw ValidationError("head_forward: input width " + std::to_string(x.cols()) +
                              " != head in_dim " + std::to_string(head.in_dim()));

    Matrix a1(b, h);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < h; ++j) {
            const double* w = head.w1.row(j);
            const double* xi = x.row(i);
            double s = head.b1[j];
            for (int c = 0; c < head.in_dim(); ++c) s += w[c] * xi[c];
            a1(i, j) = s;
        }

    std::vector<double> mean(h), inv_std(h);
    if (mode == RunMode::Train) {
        for (int j = 0; j < h; ++j) {
            double mu = 0.0;
            for (int i = 0; i < b; ++i) mu += a1(i, j);
            mu /= b;
            double var = 0.0;
            for (int i = 0; i < b; ++i) {
                const double d = a1(i, j) - mu;
                var += d * d;
            }
            var /= b;
            mean[j] = mu;
            inv_std[j] = 1.0 / std::sqrt(var + kBnEps);
            if (update_running) {
                head.bn_running_mean[j] =
                    (1.0 - kBnMomentum) * head.bn_running_mean[j] + kBnMomentum * mu;
                head.bn_running_var[j] =
                    (1.0 - kBnMomentum) * head.bn_running_var[j] + kBnMomentum * var;
            }
        }
    } else {
        for (int j = 0; j < h; ++j) {
            mean[j] = head.bn_running_mean[j];
            inv_std[j] = 1.0 / std::sqrt(head.bn_running_var[j] + kBnEps);
        }
    }

    Matrix xhat(b, h), y(b, h), act(b, h);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < h; ++j) {
            xhat(i, j) = (a1(i, j) - mean[j]) * inv_std[j];
            y(i, j) = head.bn_gamma[j] * xhat(i, j) + head.bn_beta[j];
            double v = y(i, j) > 0.0 ? y(i, j) : 0.0;
            if (mask) v *= (*mask)(i, j);
            act(i, j) = v;
        }

    Matrix logp(b, classes);
    for (int i = 0; i < b; ++i) {
        double row_max = -1e300;
        for (int c = 0; c < classes; ++c) {
            const double* w = head.w2.row(c);
            double s = head.b2[c];
            for (int j = 0; j < h; ++j) s += w[j] * act(i, j);
            logp(i, c) = s;
            row_max = std::max(row_max, s);
        }
        double lse = 0.0;
        for (int c = 0; c < classes; ++c) lse += std::exp(logp(i, c) - row_max);
        lse = row_max + std::log(lse);
        for (int c = 0; c < classes; ++c) logp(i, c) -= lse;
    }

    if (cache) {
        cache->x = x;
        cache->a1 = std::move(a1);
        cache->mean = std::move(mean);
        cache->inv_std = std::move(inv_std);
        cache->xhat = std::move(xhat);
        cache->y = std::move(y);
        cache->act = std::move(act);
        cache->logp = logp;
    }
    return logp;
}

// Gradients of the mean batch NLL. Returns dL/dx (B x W).
Matrix head_backward(const HeadParams& head, const HeadCache& cache,
                     const std::vector<int>& labels, const Matrix* mask, HeadGrads& grads) {
    const int b = cache.x.rows();
    const int h = head.hidden_dim();
    const int classes = head.num_classes();
    const int w_in = head.in_dim();

    Matrix dlogits(b, classes);
    for (int i = 0; i < b; ++i)
        for (int c = 0; c < classes; ++c)
            dlogits(i, c) = (std::exp(cache.logp(i, c)) - (labels[i] == c ? 1.0 : 0.0)) / b;

    Matrix dact(b, h, 0.0);
    for (int i = 0; i < b; ++i)
        for (int c = 0; c < classes; ++c) {
            const double g = dlogits(i, c);
            if (g == 0.0) continue;
            const double* w = head.w2.row(c);
            double* gw = grads.w2.row(c);
            for (int j = 0; j < h; ++j) {
                gw[j] += g * cache.act(i, j);
                dact(i, j) += g * w[j];
            }
            grads.b2[c] += g;
        }

    // back through dropout and ReLU
    Matrix dy(b, h);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < h; ++j) {
            double g = dact(i, j);
            if (mask) g *= (*mask)(i, j);
            dy(i, j) = cache.y(i, j) > 0.0 ? g : 0.0;
        }

    // batch-norm backward over the batch dimension
    Matrix da1(b, h);
    for (int j = 0; j < h; ++j) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int i = 0; i < b; ++i) {
            sum_dy += dy(i, j);
            sum_dy_xhat += dy(i, j) * cache.xhat(i, j);
        }
        grads.bn_beta[j] += sum_dy;
        grads.bn_gamma[j] += sum_dy_xhat;
        const double scale = head.bn_gamma[j] * cache.inv_std[j];
        for (int i = 0; i < b; ++i) {
            da1(i, j) = scale * (dy(i, j) - sum_dy / b - cache.xhat(i, j) * sum_dy_xhat / b);
        }
    }

    Matrix dx(b, w_in, 0.0);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < h; ++j) {
            const double g = da1(i, j);
            if (g == 0.0) continue;
            grads.b1[j] += g;
            const double* xi = cache.x.row(i);
            double* gw = grads.w1.row(j);
            const double* w = head.w1.row(j);
            double* dxi = dx.row(i);
            for (int c = 0; c < w_in; ++c) {
                gw[c] += g * xi[c];
                dxi[c] += g * w[c];
            }
        }
    return dx;
}

} // namespace

std::vector<double> embed(const ModelParams& model, const SampleGraphs& sample) {
    std::vector<double> out;
    if (model.uses_points()) {
        BranchEval ev;
        branch_forward(sample.point_graph, model.point_branch, model.readout, false, ev);
        out.insert(out.end(), ev.readout.begin(), ev.readout.end());
    }
    if (model.uses_voxels()) {
        BranchEval ev;
        branch_forward(sample.voxel_graph, model.voxel_branch, model.readout, false, ev);
        out.insert(out.end(), ev.readout.begin(), ev.readout.end());
    }
    return out;
}

std::vector<double> forward(const ModelParams& model, const SampleGraphs& sample, RunMode mode) {
    if (mode == RunMode::Train)
        throw ValidationError("forward: train mode needs a batch; use train_model");
    const std::vector<double> e = embed(model, sample);
    Matrix x(1, static_cast<int>(e.size()));
    for (std::size_t i = 0; i < e.size(); ++i) x(0, i) = e[i];
    HeadParams head = model.head;  // eval path never mutates; copy keeps the API const
    Matrix logp = head_forward(head, x, RunMode::Eval, false, nullptr, nullptr);
    std::vector<double> out(model.num_classes);
    for (int c = 0; c < model.num_classes; ++c) out[c] = logp(0, c);
    return out;
}

double nll_loss(const std::vector<double>& log_probs, int label) {
    if (label < 0 || label >= static_cast<int>(log_probs.size()))
        throw ValidationError("nll_loss: label out of range");
    return -log_probs[label];
}

std::string metrics_csv(const std::vector<EpochStats>& log) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_loss,train_top1,test_top1,lr\n";
    for (const auto& s : log)
        os << s.epoch << ',' << s.train_loss << ',' << s.train_top1 << ',' << s.test_top1 << ','
           << s.lr << '\n';
    return os.str();
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
    if (!(lr >= 0.0)) throw ValidationError("train: lr must be >= 0");
    if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("train: dropout in [0,1)");
    int prev = 0;
    for (int e : lr_decay_epochs) {
        if (e <= prev || e >= epochs + 1)
            throw ValidationError("train: decay epochs must be strictly increasing and <= epochs");
        prev = e;
    }
}

TensorRefs collect_tensors(ModelParams& model) {
    TensorRefs refs;
    if (model.uses_points()) {
        TensorRefs t = collect_tensors(model.point_branch, "point");
        refs.insert(refs.end(), t.begin(), t.end());
    }
    if (model.uses_voxels()) {
        TensorRefs t = collect_tensors(model.voxel_branch, "voxel");
        refs.insert(refs.end(), t.begin(), t.end());
    }
    HeadParams& h = model.head;
    refs.push_back({"head.w1", h.w1.data(), h.w1.size()});
    refs.push_back({"head.b1", h.b1.data(), h.b1.size()});
    refs.push_back({"head.bn_gamma", h.bn_gamma.data(), h.bn_gamma.size()});
    refs.push_back({"head.bn_beta", h.bn_beta.data(), h.bn_beta.size()});
    refs.push_back({"head.w2", h.w2.data(), h.w2.size()});
    refs.push_back({"head.b2", h.b2.data(), h.b2.size()});
    return refs;
}

ModelGrads ModelGrads::zeros_like(const ModelParams& model) {
    ModelGrads g;
    if (model.uses_points()) g.point = AgcnGrads::zeros_like(model.point_branch);
    if (model.uses_voxels()) g.voxel = AgcnGrads::zeros_like(model.voxel_branch);
    const HeadParams& h = model.head;
    g.head.w1 = Matrix(h.w1.rows(), h.w1.cols());
    g.head.b1.assign(h.b1.size(), 0.0);
    g.head.bn_gamma.assign(h.bn_gamma.size(), 0.0);
    g.head.bn_beta.assign(h.bn_beta.size(), 0.0);
    g.head.w2 = Matrix(h.w2.rows(), h.w2.cols());
    g.head.b2.assign(h.b2.size(), 0.0);
    return g;
}

TensorRefs collect_tensors(ModelGrads& grads, const ModelParams& model) {
    TensorRefs refs;
    if (model.uses_points()) {
        TensorRefs t = collect_tensors(grads.point, "point");
        refs.insert(refs.end(), t.begin(), t.end());
    }
    if (model.uses_voxels()) {
        TensorRefs t = collect_tensors(grads.voxel, "voxel");
        refs.insert(refs.end(), t.begin(), t.end());
    }
    HeadGrads& h = grads.head;
    refs.push_back({"head.w1", h.w1.data(), h.w1.size()});
    refs.push_back({"head.b1", h.b1.data(), h.b1.size()});
    refs.push_back({"head.bn_gamma", h.bn_gamma.data(), h.bn_gamma.size()});
    refs.push_back({"head.bn_beta", h.bn_beta.data(), h.bn_beta.size()});
    refs.push_back({"head.w2", h.w2.data(), h.w2.size()});
    refs.push_back({"head.b2", h.b2.data(), h.b2.size()});
    return refs;
}

namespace {

struct BatchWork {
    std::vector<BranchEval> point_evals, voxel_evals;
    HeadCache head_cache;
    double loss = 0.0;
};

// Forward + loss over one batch. `mask` enables dropout; `update_running`
// folds batch stats into the running BN estimates.
double batch_forward(ModelParams& model, const std::vector<SampleGraphs>& samples,
                     const std::vector<int>& batch, RunMode mode, const Matrix* mask,
                     bool update_running, int num_threads, BatchWork* work) {
    const int b = static_cast<int>(batch.size());
    const int d = model.dims.hidden_dim;
    std::vector<BranchEval> point_evals(model.uses_points() ? b : 0);
    std::vector<BranchEval> voxel_evals(model.uses_voxels() ? b : 0);
    const bool want_cache = work != nullptr;

    parallel_for(b, num_threads, [&](int i) {
        const SampleGraphs& s = samples[batch[i]];
        if (model.uses_points())
            branch_forward(s.point_graph, model.point_branch, model.readout, want_cache,
                           point_evals[i]);
        if (model.uses_voxels())
            branch_forward(s.voxel_graph, model.voxel_branch, model.readout, want_cache,
                           voxel_evals[i]);
    });

    Matrix x(b, model.concat_dim());
    for (int i = 0; i < b; ++i) {
        int off = 0;
        if (model.uses_points()) {
            for (int j = 0; j < d; ++j) x(i, off + j) = point_evals[i].readout[j];
            off += d;
        }
        if (model.uses_voxels())
            for (int j = 0; j < d; ++j) x(i, off + j) = voxel_evals[i].readout[j];
    }

    Matrix logp = head_forward(model.head, x, mode, update_running, mask,
                               work ? &work->head_cache : nullptr);
    double loss = 0.0;
    for (int i = 0; i < b; ++i) loss += -logp(i, samples[batch[i]].label);
    loss /= b;

    if (work) {
        work->point_evals = std::move(point_evals);
        work->voxel_evals = std::move(voxel_evals);
        work->loss = loss;
    }
    return loss;
}

// Backward for a batch previously run through batch_forward with caches.
void batch_backward(ModelParams& model, const std::vector<SampleGraphs>& samples,
                    const std::vector<int>& batch, const Matrix* mask, BatchWork& work,
                    int num_threads, ModelGrads& grads) {
    const int b = static_cast<int>(batch.size());
    const int d = model.dims.hidden_dim;
    std::vector<int> labels(b);
    for (int i = 0; i < b; ++i) labels[i] = samples[batch[i]].label;

    Matrix dx = head_backward(model.head, work.head_cache, labels, mask, grads.head);

    std::vector<AgcnGrads> point_grads(model.uses_points() ? b : 0);
    std::vector<AgcnGrads> voxel_grads(model.uses_voxels() ? b : 0);
    parallel_for(b, num_threads, [&](int i) {
        const SampleGraphs& s = samples[batch[i]];
        int off = 0;
        if (model.uses_points()) {
            Matrix up = readout_upstream(work.point_evals[i], s.point_graph, model.readout,
                                         dx.row(i) + off, d);
            point_grads[i] =
                agcn_backward(s.point_graph, model.point_branch, work.point_evals[i].cache, up);
            off += d;
        }
        if (model.uses_voxels()) {
            Matrix up = readout_upstream(work.voxel_evals[i], s.voxel_graph, model.readout,
                                         dx.row(i) + off, d);
            voxel_grads[i] =
                agcn_backward(s.voxel_graph, model.voxel_branch, work.voxel_evals[i].cache, up);
        }
    });
    // fixed-order reduction keeps results independent of the worker count
    for (int i = 0; i < b; ++i) {
        if (model.uses_points()) grads.point.accumulate(point_grads[i]);
        if (model.uses_voxels()) grads.voxel.accumulate(voxel_grads[i]);
    }
}

void adam_step(ModelParams& model, ModelGrads& grads, AdamState& adam, double lr) {
    TensorRefs params = collect_tensors(model);
    TensorRefs gs = collect_tensors(grads, model);
    if (adam.m.empty()) {
        adam.m.resize(params.size());
        adam.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            adam.m[i].assign(params[i].size, 0.0);
            adam.v[i].assign(params[i].size, 0.0);
        }
    }
    adam.step += 1;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(adam.step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(adam.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* p = params[i].data;
        const double* g = gs[i].data;
        double* m = adam.m[i].data();
        double* v = adam.v[i].data();
        for (std::size_t j = 0; j < params[i].size; ++j) {
            m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * g[j];
            v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kAdamEps);
        }
    }
}

} // namespace

EvalMetrics evaluate_model(const ModelParams& model, const std::vector<SampleGraphs>& set,
                           int num_threads) {
    EvalMetrics metrics;
    metrics.confusion = Matrix(model.num_classes, model.num_classes, 0.0);
    if (set.empty()) return metrics;

    std::vector<std::vector<double>> logps(set.size());
    parallel_for(static_cast<int>(set.size()), num_threads,
                 [&](int i) { logps[i] = forward(model, set[i], RunMode::Eval); });

    int hit1 = 0, hit5 = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const auto& lp = logps[i];
        const int label = set[i].label;
        const int pred = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
        metrics.per_sample.emplace_back(label, pred);
        metrics.confusion(label, pred) += 1.0;
        if (pred == label) ++hit1;
        if (model.num_classes >= 5) {
            std::vector<int> order(lp.size());
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](int a, int c) { return lp[a] > lp[c]; });
            for (int k = 0; k < 5; ++k)
                if (order[k] == label) {
                    ++hit5;
                    break;
                }
        }
    }
    metrics.top1 = static_cast<double>(hit1) / static_cast<double>(set.size());
    if (model.num_classes >= 5)
        metrics.top5 = static_cast<double>(hit5) / static_cast<double>(set.size());
    return metrics;
}

TrainResult train_model(const std::vector<SampleGraphs>& train_set,
                        const std::vector<SampleGraphs>& test_set, const ModelDims& dims,
                        int num_classes, const TrainConfig& config,
                        const std::array<std::uint8_t, 32>& config_hash,
                        std::ostream* progress) {
    config.validate();
    if (train_set.empty()) throw ValidationError("train: empty train split");
    for (const auto& s : train_set)
        if (s.label < 0 || s.label >= num_classes)
            throw ValidationError("train: sample label out of range");

    ModelParams model = init_model(dims, config.branch_mode, config.readout, num_classes,
                                   config.dropout, mix_seed(config.seed, kSeedInit));
    AdamState adam;
    Rng master(mix_seed(config.seed, 0x7E));

    TrainResult result;
    std::vector<int> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        int decays = 0;
        for (int e : config.lr_decay_epochs)
            if (epoch >= e) ++decays;
        const double lr = config.lr * std::pow(config.lr_decay_factor, decays);

        Rng shuffle_rng(mix_seed(config.seed, kSeedShuffle, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        int seen = 0;
        int batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            std::vector<int> batch(order.begin() + start, order.begin() + stop);
            const int b = static_cast<int>(batch.size());

            Matrix mask;
            const Matrix* mask_ptr = nullptr;
            if (config.dropout > 0.0) {
                Rng drop_rng(mix_seed(mix_seed(config.seed, kSeedDropout),
                                      static_cast<std::uint64_t>(epoch),
                                      static_cast<std::uint64_t>(batch_index)));
                mask = Matrix(b, dims.head_hidden);
                const double keep = 1.0 - config.dropout;
                for (std::size_t i = 0; i < mask.size(); ++i)
                    mask.data()[i] = drop_rng.unit() < keep ? 1.0 / keep : 0.0;
                mask_ptr = &mask;
            }

            BatchWork work;
            const double loss = batch_forward(model, train_set, batch, RunMode::Train, mask_ptr,
                                              true, config.num_threads, &work);
            if (!std::isfinite(loss))
                throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                     " batch " + std::to_string(batch_index));
            ModelGrads grads = ModelGrads::zeros_like(model);
            batch_backward(model, train_set, batch, mask_ptr, work, config.num_threads, grads);
            adam_step(model, grads, adam, lr);

            loss_sum += loss * b;
            seen += b;
            ++batch_index;
        }
        master.next_u64();  // one tick per completed epoch

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / seen;
        stats.lr = lr;
        stats.train_top1 = evaluate_model(model, train_set, config.num_threads).top1;
        stats.test_top1 =
            test_set.empty() ? 0.0 : evaluate_model(model, test_set, config.num_threads).top1;
        result.log.push_back(stats);
        if (progress) {
            (*progress) << "epoch " << epoch << " loss " << stats.train_loss << " train_top1 "
                        << stats.train_top1 << " test_top1 " << stats.test_top1 << " lr " << lr
                        << std::endl;
        }
    }

    result.checkpoint.version = 1;
    result.checkpoint.model = std::move(model);
    result.checkpoint.adam = std::move(adam);
    result.checkpoint.epoch = static_cast<std::uint64_t>(config.epochs);
    result.checkpoint.rng_state = master.save_state();
    result.checkpoint.config_hash = config_hash;
    return result;
}

GradCheckReport model_gradient_check(const std::vector<SampleGraphs>& batch_samples,
                                     const ModelDims& dims, int num_classes,
                                     BranchMode branch_mode, const GradCheckOptions& options) {
    ModelParams model = init_model(dims, branch_mode, Readout::Absorbing, num_classes, 0.0,
                                   mix_seed(options.seed, kSeedInit));
    std::vector<int> batch(batch_samples.size());
    std::iota(batch.begin(), batch.end(), 0);

    BatchWork work;
    batch_forward(model, batch_samples, batch, RunMode::Train, nullptr, false, 1, &work);
    ModelGrads analytic = ModelGrads::zeros_like(model);
    batch_backward(model, batch_samples, batch, nullptr, work, 1, analytic);

    TensorRefs params = collect_tensors(model);
    TensorRefs grads = collect_tensors(analytic, model);

    auto eval_loss = [&](BatchWork& w) {
        return batch_forward(model, batch_samples, batch, RunMode::Train, nullptr, false, 1, &w);
    };
    // Same rule as the AGCN checker: only pre-activations the perturbation
    // moved count, near-zero or sign-flipped ones mean the FD straddles a
    // kink.
    auto kink = [&](const BatchWork& p, const BatchWork& m) {
        auto scan = [&](const Matrix& a, const Matrix& b) {
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double x = a.data()[i], y = b.data()[i];
                if (x == y) continue;
                if ((x > 0.0) != (y > 0.0)) return true;
                if (std::min(std::fabs(x), std::fabs(y)) < 10.0 * options.epsilon) return true;
            }
            return false;
        };
        auto scan_branch = [&](const std::vector<BranchEval>& a,
                               const std::vector<BranchEval>& b) {
            for (std::size_t s = 0; s < a.size(); ++s)
                for (std::size_t l = 0; l < a[s].cache.layers.size(); ++l)
                    if (scan(a[s].cache.layers[l].pre, b[s].cache.layers[l].pre)) return true;
            return false;
        };
        return scan_branch(p.point_evals, m.point_evals) ||
               scan_branch(p.voxel_evals, m.voxel_evals) || scan(p.head_cache.y, m.head_cache.y);
    };

    const double eps = options.epsilon;
    GradCheckReport report;
    report.tolerance = options.tolerance;
    for (std::size_t r = 0; r < params.size(); ++r) {
        GradCheckGroup group;
        group.name = params[r].name;
        for (std::size_t i = 0; i < params[r].size; ++i) {
            double& coord = params[r].data[i];
            const double saved = coord;
            BatchWork w_plus, w_minus;
            coord = saved + eps;
            const double lp = eval_loss(w_plus);
            coord = saved - eps;
            const double lm = eval_loss(w_minus);
            coord = saved;
            if (kink(w_plus, w_minus)) {
                ++group.skipped;
                continue;
            }
            const double fd = (lp - lm) / (2.0 * eps);
            const double ga = grads[r].data[i];
            const double rel =
                std::fabs(ga - fd) / std::max({1e-2, std::fabs(ga), std::fabs(fd)});
            group.max_rel_err = std::max(group.max_rel_err, rel);
            ++group.checked;
        }
        report.groups.push_back(std::move(group));
    }
    return report;
}

namespace {

constexpr char kCkptMagic[4] = {'A', 'G', 'C', 'K'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}
void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}
std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}
std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}
void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string get_string(std::istream& is) {
    const std::uint32_t n = get_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}
void put_tensor(std::ostream& os, const std::string& name, const double* data, std::size_t n) {
    put_string(os, name);
    put_u64(os, n);
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

// Checkpoint additionally carries the BN running statistics, which are
// state but not optimizer-managed parameters.
TensorRefs state_tensors(ModelParams& model) {
    TensorRefs refs = collect_tensors(model);
    refs.push_back({"head.bn_running_mean", model.head.bn_running_mean.data(),
                    model.head.bn_running_mean.size()});
    refs.push_back({"head.bn_running_var", model.head.bn_running_var.data(),
                    model.head.bn_running_var.size()});
    return refs;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    os.write(kCkptMagic, 4);
    put_u32(os, ckpt.version);
    os.write(reinterpret_cast<const char*>(ckpt.config_hash.data()), 32);
    put_u64(os, ckpt.epoch);
    put_u64(os, ckpt.adam.step);
    put_string(os, ckpt.rng_state);

    nlohmann::json meta;
    meta["branch_mode"] = to_string(ckpt.model.branch_mode);
    meta["readout"] = ckpt.model.readout == Readout::Absorbing ? "absorbing" : "max_pool";
    meta["num_classes"] = ckpt.model.num_classes;
    meta["dropout"] = ckpt.model.dropout;
    meta["dims"] = {{"point_in_dim", ckpt.model.dims.point_in_dim},
                    {"voxel_in_dim", ckpt.model.dims.voxel_in_dim},
                    {"hidden_dim", ckpt.model.dims.hidden_dim},
                    {"num_kernels", ckpt.model.dims.num_kernels},
                    {"num_blocks", ckpt.model.dims.num_blocks},
                    {"head_hidden", ckpt.model.dims.head_hidden}};
    put_string(os, meta.dump());

    ModelParams& model = const_cast<ModelParams&>(ckpt.model);
    TensorRefs refs = state_tensors(model);
    std::uint32_t count = static_cast<std::uint32_t>(refs.size());
    const bool with_adam = !ckpt.adam.m.empty();
    if (with_adam) count += 2 * static_cast<std::uint32_t>(collect_tensors(model).size());
    put_u32(os, count);
    for (const auto& r : refs) put_tensor(os, r.name, r.data, r.size);
    if (with_adam) {
        TensorRefs params = collect_tensors(model);
        for (std::size_t i = 0; i < params.size(); ++i) {
            put_tensor(os, "adam.m." + params[i].name, ckpt.adam.m[i].data(),
                       ckpt.adam.m[i].size());
            put_tensor(os, "adam.v." + params[i].name, ckpt.adam.v[i].data(),
                       ckpt.adam.v[i].size());
        }
    }
    if (!os) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw ParseError(path + ": bad checkpoint magic");
    Checkpoint ckpt;
    ckpt.version = get_u32(is);
    if (ckpt.version != 1) throw ParseError(path + ": unsupported checkpoint version");
    is.read(reinterpret_cast<char*>(ckpt.config_hash.data()), 32);
    ckpt.epoch = get_u64(is);
    ckpt.adam.step = get_u64(is);
    ckpt.rng_state = get_string(is);

    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(get_string(is));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": checkpoint metadata: " + e.what());
    }
    ModelDims dims;
    dims.point_in_dim = meta["dims"]["point_in_dim"].get<int>();
    dims.voxel_in_dim = meta["dims"]["voxel_in_dim"].get<int>();
    dims.hidden_dim = meta["dims"]["hidden_dim"].get<int>();
    dims.num_kernels = meta["dims"]["num_kernels"].get<int>();
    dims.num_blocks = meta["dims"]["num_blocks"].get<int>();
    dims.head_hidden = meta["dims"]["head_hidden"].get<int>();
    const Readout readout =
        meta["readout"].get<std::string>() == "absorbing" ? Readout::Absorbing : Readout::MaxPool;
    ckpt.model = init_model(dims, branch_mode_from_string(meta["branch_mode"].get<std::string>()),
                            readout, meta["num_classes"].get<int>(),
                            meta["dropout"].get<double>(), 0);

    TensorRefs refs = state_tensors(ckpt.model);
    TensorRefs params = collect_tensors(ckpt.model);
    ckpt.adam.m.assign(params.size(), {});
    ckpt.adam.v.assign(params.size(), {});

    const std::uint32_t count = get_u32(is);
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::string name = get_string(is);
        const std::uint64_t n = get_u64(is);
        std::vector<double> buf(n);
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!is) throw ParseError(path + ": truncated tensor " + name);
        bool placed = false;
        for (const auto& r : refs) {
            if (r.name == name) {
                if (r.size != n) throw ParseError(path + ": size mismatch for " + name);
                std::memcpy(r.data, buf.data(), n * sizeof(double));
                placed = true;
                break;
            }
        }
        if (!placed && name.rfind("adam.", 0) == 0) {
            const bool is_m = name.rfind("adam.m.", 0) == 0;
            const std::string base = name.substr(7);
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (params[i].name == base) {
                    (is_m ? ckpt.adam.m : ckpt.adam.v)[i] = std::move(buf);
                    placed = true;
                    break;
                }
            }
        }
        if (!placed) throw ParseError(path + ": unknown tensor " + name);
    }
    if (ckpt.adam.m.empty() || ckpt.adam.m[0].empty()) {
        // checkpoint written before any optimizer step
        ckpt.adam.m.clear();
        ckpt.adam.v.clear();
    }
    return ckpt;
}

} // namespace evagc
