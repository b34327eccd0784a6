#include "evagc/run_config.hpp"

#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "evagc/errors.hpp"

namespace evagc {

std::array<std::uint8_t, 32> sha256_digest(const std::string& data) {
    std::array<std::uint8_t, 32> out{};
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    EVP_DigestUpdate(ctx, data.data(), data.size());
    EVP_DigestFinal_ex(ctx, out.data(), &len);
    EVP_MD_CTX_free(ctx);
    return out;
}

std::string hex_string(const std::array<std::uint8_t, 32>& digest) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (std::uint8_t b : digest) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xf]);
    }
    return s;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["manifest"] = manifest;
    j["seed"] = seed;
    j["synth"] = {{"num_classes", synth.num_classes},
                  {"sensor_width", synth.sensor_width},
                  {"sensor_height", synth.sensor_height},
                  {"duration_us", synth.duration_us},
                  {"events_per_sample", synth.events_per_sample},
                  {"noise_rate", synth.noise_rate},
                  {"pattern_radius", synth.pattern_radius},
                  {"speed", synth.speed}};
    j["sampling"] = {{"strategy", to_string(sampling.strategy)},
                     {"max_num_events", sampling.max_num_events},
                     {"target_count", sampling.target_count},
                     {"t_norm", sampling.t_norm}};
    j["voxel"] = {{"size_h", voxel.size_h},
                  {"size_w", voxel.size_w},
                  {"size_t", voxel.size_t},
                  {"top_k", voxel.top_k},
                  {"feature_dim", voxel.feature_dim},
                  {"coord_mode", to_string(voxel.coord_mode)}};
    j["graph"] = {{"point_radius", point_radius}, {"voxel_radius", voxel_radius}};
    j["model"] = {{"hidden_dim", model.hidden_dim},
                  {"num_kernels", model.num_kernels},
                  {"num_blocks", model.num_blocks},
                  {"head_hidden", model.head_hidden}};
    j["train"] = {{"epochs", train.epochs},
                  {"lr", train.lr},
                  {"lr_decay_epochs", train.lr_decay_epochs},
                  {"lr_decay_factor", train.lr_decay_factor},
                  {"batch_size", train.batch_size},
                  {"dropout", train.dropout},
                  {"branch", to_string(train.branch_mode)},
                  {"num_threads", train.num_threads}};
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
        c.manifest = j.at("manifest").get<std::string>();
        c.seed = j.at("seed").get<std::uint64_t>();
        const auto& sy = j.at("synth");
        c.synth.num_classes = sy.at("num_classes").get<int>();
        c.synth.sensor_width = sy.at("sensor_width").get<std::uint16_t>();
        c.synth.sensor_height = sy.at("sensor_height").get<std::uint16_t>();
        c.synth.duration_us = sy.at("duration_us").get<std::uint64_t>();
        c.synth.events_per_sample = sy.at("events_per_sample").get<int>();
        c.synth.noise_rate = sy.at("noise_rate").get<double>();
        c.synth.pattern_radius = sy.at("pattern_radius").get<double>();
        c.synth.speed = sy.at("speed").get<double>();
        const auto& sa = j.at("sampling");
        c.sampling.strategy = sampling_strategy_from_string(sa.at("strategy").get<std::string>());
        c.sampling.max_num_events = sa.at("max_num_events").get<int>();
        c.sampling.target_count = sa.at("target_count").get<int>();
        c.sampling.t_norm = sa.at("t_norm").get<double>();
        const auto& vx = j.at("voxel");
        c.voxel.size_h = vx.at("size_h").get<double>();
        c.voxel.size_w = vx.at("size_w").get<double>();
        c.voxel.size_t = vx.at("size_t").get<double>();
        c.voxel.top_k = vx.at("top_k").get<int>();
        c.voxel.feature_dim = vx.at("feature_dim").get<int>();
        c.voxel.coord_mode = voxel_coord_mode_from_string(vx.at("coord_mode").get<std::string>());
        const auto& gr = j.at("graph");
        c.point_radius = gr.at("point_radius").get<double>();
        c.voxel_radius = gr.at("voxel_radius").get<double>();
        const auto& mo = j.at("model");
        c.model.hidden_dim = mo.at("hidden_dim").get<int>();
        c.model.num_kernels = mo.at("num_kernels").get<int>();
        c.model.num_blocks = mo.at("num_blocks").get<int>();
        c.model.head_hidden = mo.at("head_hidden").get<int>();
        const auto& tr = j.at("train");
        c.train.epochs = tr.at("epochs").get<int>();
        c.train.lr = tr.at("lr").get<double>();
        c.train.lr_decay_epochs = tr.at("lr_decay_epochs").get<std::vector<int>>();
        c.train.lr_decay_factor = tr.at("lr_decay_factor").get<double>();
        c.train.batch_size = tr.at("batch_size").get<int>();
        c.train.dropout = tr.at("dropout").get<double>();
        c.train.branch_mode = branch_mode_from_string(tr.at("branch").get<std::string>());
        c.train.num_threads = tr.at("num_threads").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    c.train.seed = c.seed;
    c.model.voxel_in_dim = c.voxel.feature_dim;
    return c;
}

namespace {

// Recursive strict merge: every key in `patch` must already exist in
// `base`, so typos fail loudly instead of being ignored.
void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string key = where.empty() ? it.key() : where + "." + it.key();
        if (!base.contains(it.key())) throw ParseError("config: unknown key '" + key + "'");
        if (it->is_object() && base[it.key()].is_object())
            merge_strict(base[it.key()], *it, key);
        else
            base[it.key()] = *it;
    }
}

void flatten(const nlohmann::json& j, const std::string& prefix,
             std::vector<std::pair<std::string, std::string>>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it->is_object())
            flatten(*it, key, out);
        else
            out.emplace_back(key, it->dump());
    }
}

} // namespace

RunConfig RunConfig::load(const std::string& path, const std::vector<std::string>& overrides) {
    nlohmann::json j = RunConfig().to_json();
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config " + path);
        nlohmann::json file_json;
        try {
            is >> file_json;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ": " + e.what());
        }
        merge_strict(j, file_json, "");
    }
    for (const std::string& ov : overrides) {
        const std::size_t eq = ov.find('=');
        if (eq == std::string::npos)
            throw ParseError("override '" + ov + "' is not key=value");
        std::string pointer = "/" + ov.substr(0, eq);
        for (auto& ch : pointer)
            if (ch == '.') ch = '/';
        const std::string value = ov.substr(eq + 1);
        const nlohmann::json::json_pointer jp(pointer);
        if (!j.contains(jp)) throw ParseError("override: unknown key '" + ov.substr(0, eq) + "'");
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(value);
        } catch (const nlohmann::json::exception&) {
            parsed = value;  // bare strings need no quotes on the command line
        }
        j[jp] = parsed;
    }
    return from_json(j);
}

std::vector<std::pair<std::string, std::string>> RunConfig::schema() {
    std::vector<std::pair<std::string, std::string>> out;
    flatten(RunConfig().to_json(), "", out);
    return out;
}

std::array<std::uint8_t, 32> RunConfig::canonical_hash() const {
    return sha256_digest(to_json().dump());
}

std::string RunConfig::preprocess_cache_key() const {
    nlohmann::json j = to_json();
    nlohmann::json sub;
    sub["sampling"] = j["sampling"];
    sub["voxel"] = j["voxel"];
    sub["graph"] = j["graph"];
    sub["seed"] = j["seed"];
    return hex_string(sha256_digest(sub.dump())).substr(0, 16);
}

PipelineConfig RunConfig::pipeline() const {
    PipelineConfig p;
    p.sampling = sampling;
    p.voxel = voxel;
    p.point_radius = point_radius;
    p.voxel_radius = voxel_radius;
    p.branch_mode = train.branch_mode;
    return p;
}

} // namespace evagc
