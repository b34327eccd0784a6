// evagc: event-stream classification with dual point/voxel absorbing graphs.
// Subcommands cover the full pipeline: synth, preprocess, train, eval,
// ablate, gradcheck, export-embeddings.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "evagc/classifier.hpp"
#include "evagc/errors.hpp"
#include "evagc/event_io.hpp"
#include "evagc/pipeline.hpp"
#include "evagc/rng.hpp"
#include "evagc/run_config.hpp"

namespace fs = std::filesystem;
using namespace evagc;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = ".";
    std::string cache_dir;
    std::vector<std::string> overrides;
    std::int64_t seed = -1;  // <0 means "use the config's seed"
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_cache = true) {
    cmd->add_option("--config", args.config_path, "JSON run configuration");
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("--out", args.out_dir, "output directory");
    if (with_cache) cmd->add_option("--cache", args.cache_dir, "preprocessing cache directory");
    cmd->add_option("--set", args.overrides, "config override key=value (repeatable)")
        ->take_all();
}

RunConfig load_config(const CommonArgs& args) {
    RunConfig config = RunConfig::load(args.config_path, args.overrides);
    if (args.seed >= 0) {
        config.seed = static_cast<std::uint64_t>(args.seed);
        config.train.seed = config.seed;
    }
    return config;
}

std::string config_keys_footer() {
    std::ostringstream os;
    os << "Config keys (defaults):\n";
    for (const auto& [key, value] : RunConfig::schema())
        os << "  " << key << " = " << value << '\n';
    return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct SplitData {
    std::vector<SampleGraphs> train, test;
};

SplitData preprocess_all(const RunConfig& config, const DatasetManifest& manifest,
                         const std::string& cache_dir) {
    PipelineStats stats;
    const auto t0 = std::chrono::steady_clock::now();
    SplitData data;
    const std::string key = cache_dir.empty() ? "" : config.preprocess_cache_key();
    data.train = preprocess_split(manifest, Split::Train, config.pipeline(), config.seed,
                                  cache_dir, key, &stats);
    data.test = preprocess_split(manifest, Split::Test, config.pipeline(), config.seed,
                                 cache_dir, key, &stats);
    std::cout << "preprocess: " << std::fixed << std::setprecision(2) << seconds_since(t0)
              << "s (cache hits " << stats.cache_hits << ", misses " << stats.cache_misses
              << ")" << std::defaultfloat << std::endl;
    return data;
}

TrainResult run_training(const RunConfig& config, const DatasetManifest& manifest,
                         const std::string& cache_dir, std::ostream* progress) {
    SplitData data = preprocess_all(config, manifest, cache_dir);
    ModelDims dims = config.model;
    dims.voxel_in_dim = config.voxel.feature_dim;
    return train_model(data.train, data.test, dims, manifest.num_classes, config.train,
                       config.canonical_hash(), progress);
}

int cmd_synth(const CommonArgs& args, int num_classes, int per_class) {
    RunConfig config = load_config(args);
    SynthConfig synth = config.synth;
    if (num_classes > 0) synth.num_classes = num_classes;
    fs::create_directories(args.out_dir);

    DatasetManifest manifest;
    manifest.name = "synthetic";
    manifest.num_classes = synth.num_classes;
    manifest.seed = config.seed;

    for (int c = 0; c < synth.num_classes; ++c) {
        const std::string class_dir = "class_" + std::to_string(c);
        fs::create_directories(fs::path(args.out_dir) / class_dir);
        // stratified 80/20 split, seeded per class
        std::vector<int> order(per_class);
        for (int i = 0; i < per_class; ++i) order[i] = i;
        Rng rng(mix_seed(config.seed, 0xB0, static_cast<std::uint64_t>(c)));
        rng.shuffle(order);
        const int train_count = per_class * 4 / 5;

        for (int i = 0; i < per_class; ++i) {
            const EventCloud cloud = generate_synthetic(
                c, synth, mix_seed(config.seed, static_cast<std::uint64_t>(c),
                                   static_cast<std::uint64_t>(i)));
            std::ostringstream name;
            name << class_dir << "/sample_" << std::setw(4) << std::setfill('0') << i << ".evs";
            write_events(cloud, (fs::path(args.out_dir) / name.str()).string(),
                         EventFormat::Binary);
            ManifestEntry entry;
            entry.path = name.str();
            entry.label = c;
            int rank = 0;
            while (order[rank] != i) ++rank;
            entry.split = rank < train_count ? Split::Train : Split::Test;
            manifest.samples.push_back(std::move(entry));
        }
    }
    const std::string manifest_path = (fs::path(args.out_dir) / "manifest.json").string();
    manifest.save(manifest_path);
    std::cout << "wrote " << manifest.samples.size() << " samples ("
              << manifest.indices(Split::Train).size() << " train / "
              << manifest.indices(Split::Test).size() << " test) to " << args.out_dir
              << std::endl;
    return 0;
}

int cmd_preprocess(const CommonArgs& args, const std::string& manifest_path) {
    RunConfig config = load_config(args);
    const std::string mpath = manifest_path.empty() ? config.manifest : manifest_path;
    DatasetManifest manifest = DatasetManifest::load(mpath);
    if (args.cache_dir.empty()) throw ValidationError("preprocess: --cache is required");
    preprocess_all(config, manifest, args.cache_dir);
    std::cout << "cache ready under " << args.cache_dir << "/" << config.preprocess_cache_key()
              << std::endl;
    return 0;
}

int cmd_train(const CommonArgs& args, const std::string& manifest_path) {
    RunConfig config = load_config(args);
    const std::string mpath = manifest_path.empty() ? config.manifest : manifest_path;
    DatasetManifest manifest = DatasetManifest::load(mpath);
    fs::create_directories(args.out_dir);

    TrainResult result = run_training(config, manifest, args.cache_dir, &std::cout);

    const std::string ckpt_path = (fs::path(args.out_dir) / "checkpoint.agck").string();
    save_checkpoint(result.checkpoint, ckpt_path);
    std::ofstream metrics((fs::path(args.out_dir) / "metrics.csv").string());
    metrics << metrics_csv(result.log);

    std::cout << "checkpoint: " << ckpt_path << std::endl;
    std::cout << "final test top1: " << result.log.back().test_top1 << std::endl;
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint_path,
             const std::string& manifest_path, const std::string& split_name) {
    RunConfig config = load_config(args);
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    if (ckpt.config_hash != config.canonical_hash())
        throw ValidationError("eval: checkpoint was trained under a different config "
                              "(hash mismatch)");
    const std::string mpath = manifest_path.empty() ? config.manifest : manifest_path;
    DatasetManifest manifest = DatasetManifest::load(mpath);
    const Split split = split_name == "train" ? Split::Train : Split::Test;

    const std::string key = args.cache_dir.empty() ? "" : config.preprocess_cache_key();
    std::vector<SampleGraphs> samples = preprocess_split(
        manifest, split, config.pipeline(), config.seed, args.cache_dir, key, nullptr);
    EvalMetrics metrics = evaluate_model(ckpt.model, samples, config.train.num_threads);

    std::cout << "samples: " << samples.size() << '\n';
    std::cout << "top1: " << metrics.top1 << '\n';
    if (metrics.top5) std::cout << "top5: " << *metrics.top5 << '\n';

    fs::create_directories(args.out_dir);
    const std::string conf_path = (fs::path(args.out_dir) / "confusion.csv").string();
    std::ofstream os(conf_path);
    for (int r = 0; r < metrics.confusion.rows(); ++r) {
        for (int c = 0; c < metrics.confusion.cols(); ++c)
            os << (c ? "," : "") << static_cast<long long>(metrics.confusion(r, c));
        os << '\n';
    }
    std::cout << "confusion matrix: " << conf_path << std::endl;
    return 0;
}

int cmd_ablate(const CommonArgs& args, const std::string& axis,
               const std::string& manifest_path) {
    RunConfig base = load_config(args);
    const std::string mpath = manifest_path.empty() ? base.manifest : manifest_path;
    DatasetManifest manifest = DatasetManifest::load(mpath);
    fs::create_directories(args.out_dir);

    // setting label -> config mutation
    std::vector<std::pair<std::string, RunConfig>> runs;
    auto variant = [&](const std::string& name) -> RunConfig& {
        runs.emplace_back(name, base);
        return runs.back().second;
    };
    if (axis == "branch") {
        for (const char* m : {"point_only", "voxel_only", "dual"})
            variant(m).train.branch_mode = branch_mode_from_string(m);
    } else if (axis == "blocks") {
        for (int b : {1, 2, 3}) variant(std::to_string(b)).model.num_blocks = b;
    } else if (axis == "voxel_k") {
        for (int k : {1024, 1536, 2048, 2560, 3072})
            variant(std::to_string(k)).voxel.top_k = k;
    } else if (axis == "voxel_size") {
        for (double s : {2.0, 3.0, 4.0, 5.0, 6.0}) {
            std::ostringstream name;
            name << "(" << s << "," << s << "," << s << ")";
            RunConfig& c = variant(name.str());
            c.voxel.size_h = c.voxel.size_w = c.voxel.size_t = s;
        }
    } else if (axis == "max_num_events") {
        for (int m : {20, 40, 60}) variant(std::to_string(m)).sampling.max_num_events = m;
    } else if (axis == "sampling") {
        for (const char* s : {"fps", "uniform", "octree_grid"})
            variant(s).sampling.strategy = sampling_strategy_from_string(s);
    } else {
        throw ValidationError("ablate: unknown axis '" + axis + "'");
    }

    const std::string csv_path =
        (fs::path(args.out_dir) / ("ablate_" + axis + ".csv")).string();
    std::ofstream csv(csv_path);
    csv << "axis,setting,test_top1\n";
    for (auto& [name, config] : runs) {
        std::cout << "=== " << axis << " = " << name << " ===" << std::endl;
        TrainResult result = run_training(config, manifest, args.cache_dir, nullptr);
        const double top1 = result.log.back().test_top1;
        csv << axis << ',' << name << ',' << top1 << '\n';
        csv.flush();
        std::cout << axis << " = " << name << ": test top1 " << top1 << std::endl;
    }
    std::cout << "wrote " << csv_path << std::endl;
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, double tolerance, bool corrupt, int instances) {
    GradCheckOptions options;
    options.tolerance = tolerance;
    options.corrupt_mixing = corrupt;

    bool all_ok = true;
    Rng rng(mix_seed(seed, 0x6CC));
    for (int i = 0; i < instances; ++i) {
        const int m = 2 + rng.index(12);
        const int f_in = 2 + rng.index(3);
        const int d = 2 + rng.index(3);
        const int kg = 1 + rng.index(3);
        const int blocks = 1 + rng.index(3);
        Matrix coords(m, 3), features(m, f_in);
        for (std::size_t k = 0; k < coords.size(); ++k) coords.data()[k] = rng.range(0.0, 10.0);
        for (std::size_t k = 0; k < features.size(); ++k)
            features.data()[k] = rng.range(-1.0, 1.0);
        AbsorbingGraph graph = build_radius_graph(coords, features, rng.range(2.0, 6.0));

        Matrix x(m + 1, f_in, 0.0);
        for (int u = 0; u < m; ++u)
            for (int c = 0; c < f_in; ++c) x(u, c) = features(u, c);

        AgcnParams params = init_agcn_params(f_in, d, blocks, kg, rng.next_u64());
        options.seed = rng.next_u64();
        GradCheckReport report = gradient_check(graph, x, params, options);
        const bool ok = report.passed();
        all_ok = all_ok && ok;
        std::cout << "instance " << i << " (M=" << m << " B=" << blocks
                  << "): max_rel_err=" << report.max_rel_err() << (ok ? " ok" : " FAIL")
                  << std::endl;
    }

    // head + both branches through the full pipeline loss
    {
        Rng grng(mix_seed(seed, 0x6CD));
        std::vector<SampleGraphs> batch;
        for (int i = 0; i < 3; ++i) {
            SampleGraphs s;
            const int mp = 3 + grng.index(4), mv = 3 + grng.index(4);
            Matrix pc(mp, 3), pf(mp, 4), vc(mv, 3), vf(mv, 2);
            for (std::size_t k = 0; k < pc.size(); ++k) pc.data()[k] = grng.range(0.0, 8.0);
            for (std::size_t k = 0; k < pf.size(); ++k) pf.data()[k] = grng.range(-1.0, 1.0);
            for (std::size_t k = 0; k < vc.size(); ++k) vc.data()[k] = grng.range(0.0, 8.0);
            for (std::size_t k = 0; k < vf.size(); ++k) vf.data()[k] = grng.range(0.0, 1.0);
            s.point_graph = build_radius_graph(pc, pf, 4.0);
            s.voxel_graph = build_radius_graph(vc, vf, 4.0);
            s.label = i % 2;
            batch.push_back(std::move(s));
        }
        ModelDims dims;
        dims.hidden_dim = 4;
        dims.num_kernels = 2;
        dims.num_blocks = 2;
        dims.head_hidden = 6;
        GradCheckOptions mopts = options;
        mopts.seed = mix_seed(seed, 0x6CE);
        mopts.corrupt_mixing = false;  // the model check has no mutation hook
        GradCheckReport report =
            model_gradient_check(batch, dims, 2, BranchMode::Dual, mopts);
        const bool ok = report.passed();
        all_ok = all_ok && ok;
        std::cout << "model (dual + head): max_rel_err=" << report.max_rel_err()
                  << (ok ? " ok" : " FAIL") << std::endl;
    }

    std::cout << (all_ok ? "gradcheck PASS" : "gradcheck FAIL") << std::endl;
    if (!all_ok) throw NumericalError("gradient check failed");
    return 0;
}

int cmd_export_embeddings(const CommonArgs& args, const std::string& checkpoint_path,
                          const std::string& manifest_path, const std::string& split_name,
                          const std::string& out_file) {
    RunConfig config = load_config(args);
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    if (ckpt.config_hash != config.canonical_hash())
        throw ValidationError("export-embeddings: checkpoint/config hash mismatch");
    const std::string mpath = manifest_path.empty() ? config.manifest : manifest_path;
    DatasetManifest manifest = DatasetManifest::load(mpath);
    const Split split = split_name == "train" ? Split::Train : Split::Test;
    const std::string key = args.cache_dir.empty() ? "" : config.preprocess_cache_key();
    std::vector<SampleGraphs> samples = preprocess_split(
        manifest, split, config.pipeline(), config.seed, args.cache_dir, key, nullptr);

    std::ofstream os(out_file);
    if (!os) throw IoError("cannot write " + out_file);
    os.precision(17);
    for (const auto& sample : samples) {
        const std::vector<double> e = embed(ckpt.model, sample);
        os << sample.id << ',' << sample.label;
        for (double v : e) os << ',' << v;
        os << '\n';
    }
    std::cout << "wrote " << samples.size() << " embeddings to " << out_file << std::endl;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"event-stream classification with dual point/voxel absorbing graphs"};
    app.require_subcommand(1);
    app.footer(config_keys_footer());

    CommonArgs synth_args, pre_args, train_args, eval_args, ablate_args, export_args;
    int synth_classes = 0, synth_per_class = 100;
    std::string pre_manifest, train_manifest, eval_manifest, ablate_manifest, export_manifest;
    std::string eval_checkpoint, export_checkpoint;
    std::string eval_split = "test", export_split = "test";
    std::string ablate_axis, export_out = "embeddings.csv";
    std::uint64_t gc_seed = 0;
    double gc_tolerance = 1e-4;
    bool gc_corrupt = false;
    int gc_instances = 10;

    CLI::App* synth = app.add_subcommand("synth", "generate a labeled synthetic dataset");
    add_common(synth, synth_args, false);
    synth->add_option("--classes", synth_classes, "number of classes (default from config)");
    synth->add_option("--per-class", synth_per_class, "samples per class");

    CLI::App* pre = app.add_subcommand("preprocess", "fill the graph cache for a manifest");
    add_common(pre, pre_args);
    pre->add_option("--manifest", pre_manifest, "dataset manifest path");

    CLI::App* train = app.add_subcommand("train", "train a model end to end");
    add_common(train, train_args);
    train->add_option("--manifest", train_manifest, "dataset manifest path");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, eval_args);
    eval->add_option("--checkpoint", eval_checkpoint, "checkpoint path")->required();
    eval->add_option("--manifest", eval_manifest, "dataset manifest path");
    eval->add_option("--split", eval_split, "train|test");

    CLI::App* ablate = app.add_subcommand("ablate", "sweep one axis and report top-1");
    add_common(ablate, ablate_args);
    ablate->add_option("--axis", ablate_axis,
                       "branch|blocks|voxel_k|voxel_size|max_num_events|sampling")
        ->required();
    ablate->add_option("--manifest", ablate_manifest, "dataset manifest path");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    gradcheck->add_option("--seed", gc_seed, "seed for the instance battery");
    gradcheck->add_option("--tolerance", gc_tolerance, "max relative error");
    gradcheck->add_option("--instances", gc_instances, "number of random instances");
    gradcheck->add_flag("--corrupt", gc_corrupt,
                        "corrupt one gradient entry to demonstrate failure");

    CLI::App* exp = app.add_subcommand("export-embeddings", "dump pre-head features as CSV");
    add_common(exp, export_args);
    exp->add_option("--checkpoint", export_checkpoint, "checkpoint path")->required();
    exp->add_option("--manifest", export_manifest, "dataset manifest path");
    exp->add_option("--split", export_split, "train|test");
    exp->add_option("--file", export_out, "output CSV path");

    try {
        app.parse(argc, argv);
        if (synth->parsed()) return cmd_synth(synth_args, synth_classes, synth_per_class);
        if (pre->parsed()) return cmd_preprocess(pre_args, pre_manifest);
        if (train->parsed()) return cmd_train(train_args, train_manifest);
        if (eval->parsed())
            return cmd_eval(eval_args, eval_checkpoint, eval_manifest, eval_split);
        if (ablate->parsed()) return cmd_ablate(ablate_args, ablate_axis, ablate_manifest);
        if (gradcheck->parsed())
            return cmd_gradcheck(gc_seed, gc_tolerance, gc_corrupt, gc_instances);
        if (exp->parsed())
            return cmd_export_embeddings(export_args, export_checkpoint, export_manifest,
                                         export_split, export_out);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);  // 0 for --help, 1 for usage errors
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    return 0;
}
