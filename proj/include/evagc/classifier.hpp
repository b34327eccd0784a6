#ifndef EVAGC_CLASSIFIER_HPP
#define EVAGC_CLASSIFIER_HPP

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "evagc/agcn.hpp"
#include "evagc/graph.hpp"
#include "evagc/matrix.hpp"
#include "evagc/tensor_ref.hpp"

namespace evagc {

enum class BranchMode { Dual, PointOnly, VoxelOnly };
enum class RunMode { Train, Eval };

// MaxPool replaces the absorbing read-out with elementwise max over event
// nodes; it exists as the ablation control, not a production mode.
enum class Readout { Absorbing, MaxPool };

BranchMode branch_mode_from_string(const std::string& s);
std::string to_string(BranchMode m);

// Two affine layers with batch normalization, ReLU and dropout between
// them: concat -> hidden -> num_classes -> log-softmax.
struct HeadParams {
    Matrix w1;
    std::vector<double> b1;
    std::vector<double> bn_gamma, bn_beta;
    std::vector<double> bn_running_mean, bn_running_var;
    Matrix w2;
    std::vector<double> b2;

    int in_dim() const { return w1.cols(); }
    int hidden_dim() const { return w1.rows(); }
    int num_classes() const { return w2.rows(); }
};

struct ModelDims {
    int point_in_dim = 4;  // (x/w, y/h, t'/t_norm, p)
    int voxel_in_dim = 2;  // polarity fractions
    int hidden_dim = 64;   // D
    int num_kernels = 8;   // K_g
    int num_blocks = 3;    // B
    int head_hidden = 128;
};

struct ModelParams {
    BranchMode branch_mode = BranchMode::Dual;
    Readout readout = Readout::Absorbing;
    ModelDims dims;
    AgcnParams point_branch;  // unused branch left empty
    AgcnParams voxel_branch;
    HeadParams head;
    double dropout = 0.5;
    int num_classes = 0;

    bool uses_points() const { return branch_mode != BranchMode::VoxelOnly; }
    bool uses_voxels() const { return branch_mode != BranchMode::PointOnly; }
    int concat_dim() const;
};

ModelParams init_model(const ModelDims& dims, BranchMode branch_mode, Readout readout,
                       int num_classes, double dropout, std::uint64_t seed);

// One preprocessed sample: graphs for whichever branches the run uses.
struct SampleGraphs {
    AbsorbingGraph point_graph;
    AbsorbingGraph voxel_graph;
    int label = -1;
    std::string id;
};

// Pre-head embedding: the concatenated branch read-outs in eval mode.
std::vector<double> embed(const ModelParams& model, const SampleGraphs& sample);

// Eval-mode class log-probabilities for one sample (train-mode statistics
// need a batch; see train_model).
std::vector<double> forward(const ModelParams& model, const SampleGraphs& sample,
                            RunMode mode = RunMode::Eval);

double nll_loss(const std::vector<double>& log_probs, int label);

struct TrainConfig {
    int epochs = 150;
    double lr = 1e-3;
    std::vector<int> lr_decay_epochs = {60, 110};
    double lr_decay_factor = 0.1;
    int batch_size = 16;
    double dropout = 0.5;
    std::uint64_t seed = 0;
    BranchMode branch_mode = BranchMode::Dual;
    Readout readout = Readout::Absorbing;
    int num_threads = 0;  // 0 = hardware concurrency; never affects results

    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0, train_top1 = 0, test_top1 = 0, lr = 0;
};

// "epoch,train_loss,train_top1,test_top1,lr" rows, doubles at full
// round-trip precision so identical runs produce byte-identical logs.
std::string metrics_csv(const std::vector<EpochStats>& log);

struct AdamState {
    std::vector<std::vector<double>> m, v;  // aligned with collect_tensors(model)
    std::uint64_t step = 0;
};

struct Checkpoint {
    std::uint32_t version = 1;
    ModelParams model;
    AdamState adam;
    std::uint64_t epoch = 0;
    std::string rng_state;
    std::array<std::uint8_t, 32> config_hash{};
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochStats> log;
};

// Adam (0.9, 0.999, 1e-8) over seeded shuffled mini-batches with the
// configured step decay. Deterministic in (config, seed) regardless of
// num_threads. Throws NumericalError naming the batch if the loss goes
// non-finite.
TrainResult train_model(const std::vector<SampleGraphs>& train_set,
                        const std::vector<SampleGraphs>& test_set, const ModelDims& dims,
                        int num_classes, const TrainConfig& config,
                        const std::array<std::uint8_t, 32>& config_hash,
                        std::ostream* progress = nullptr);

struct EvalMetrics {
    double top1 = 0.0;
    std::optional<double> top5;  // defined when num_classes >= 5
    Matrix confusion;            // row = true label, column = prediction
    std::vector<std::pair<int, int>> per_sample;  // (label, prediction)
};

EvalMetrics evaluate_model(const ModelParams& model, const std::vector<SampleGraphs>& set,
                           int num_threads = 0);

TensorRefs collect_tensors(ModelParams& model);

struct HeadGrads {
    Matrix w1;
    std::vector<double> b1, bn_gamma, bn_beta;
    Matrix w2;
    std::vector<double> b2;
};

struct ModelGrads {
    AgcnGrads point, voxel;
    HeadGrads head;

    static ModelGrads zeros_like(const ModelParams& model);
};

TensorRefs collect_tensors(ModelGrads& grads, const ModelParams& model);

// Finite-difference check of the full pipeline loss (both branches plus the
// head; dropout off, batch statistics active) on a small batch.
GradCheckReport model_gradient_check(const std::vector<SampleGraphs>& batch,
                                     const ModelDims& dims, int num_classes,
                                     BranchMode branch_mode, const GradCheckOptions& options);

} // namespace evagc

#endif
