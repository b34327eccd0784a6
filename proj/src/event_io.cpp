#include "evagc/event_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "evagc/errors.hpp"
#include "evagc/rng.hpp"

namespace evagc {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'S', '1'};
constexpr double kTwoPi = 6.283185307179586477;

void put_u16(std::ostream& os, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

void check_bounds(const Event& e, std::uint16_t w, std::uint16_t h, const std::string& where) {
    if (e.x >= w || e.y >= h) {
        throw ValidationError(where + ": event (" + std::to_string(e.x) + "," +
                              std::to_string(e.y) + ") outside sensor " + std::to_string(w) +
                              "x" + std::to_string(h));
    }
}

void sort_by_time(EventCloud& cloud) {
    if (!std::is_sorted(cloud.events.begin(), cloud.events.end(),
                        [](const Event& a, const Event& b) { return a.t < b.t; })) {
        std::stable_sort(cloud.events.begin(), cloud.events.end(),
                         [](const Event& a, const Event& b) { return a.t < b.t; });
    }
}

EventCloud read_csv(const std::string& path, std::uint16_t w, std::uint16_t h) {
    if (w == 0 || h == 0)
        throw ValidationError("read_events(csv): sensor bounds must be supplied");
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);

    EventCloud cloud;
    cloud.sensor_width = w;
    cloud.sensor_height = h;

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const std::string where = path + ":" + std::to_string(lineno);

        long long vals[4];
        std::size_t pos = 0;
        for (int f = 0; f < 4; ++f) {
            const std::size_t next = line.find(',', pos);
            if ((f < 3) == (next == std::string::npos))
                throw ParseError(where + ": expected 4 comma-separated fields");
            const std::string tok = line.substr(pos, next == std::string::npos ? next : next - pos);
            try {
                std::size_t used = 0;
                vals[f] = std::stoll(tok, &used);
                while (used < tok.size() && std::isspace(static_cast<unsigned char>(tok[used]))) ++used;
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw ParseError(where + ": bad field '" + tok + "'");
            }
            pos = next + 1;
        }
        if (vals[0] < 0 || vals[1] < 0 || vals[2] < 0)
            throw ParseError(where + ": negative coordinate or timestamp");
        if (vals[3] != -1 && vals[3] != 0 && vals[3] != 1)
            throw ParseError(where + ": polarity must be -1, 0 or 1");

        Event e;
        e.x = static_cast<std::uint16_t>(vals[0]);
        e.y = static_cast<std::uint16_t>(vals[1]);
        e.t = static_cast<std::uint64_t>(vals[2]);
        e.p = vals[3] == 1 ? 1 : -1;  // 0 is the "off" polarity in some exporters
        check_bounds(e, w, h, where);
        cloud.events.push_back(e);
    }
    sort_by_time(cloud);
    return cloud;
}

EventCloud read_binary(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);

    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw ParseError(path + ": offset 0: bad magic, expected EVS1");

    EventCloud cloud;
    cloud.sensor_width = get_u16(is);
    cloud.sensor_height = get_u16(is);
    const std::uint64_t count = get_u64(is);
    if (!is) throw ParseError(path + ": truncated header");

    cloud.events.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        Event e;
        e.x = get_u16(is);
        e.y = get_u16(is);
        e.t = get_u64(is);
        char p;
        is.read(&p, 1);
        if (!is) {
            throw ParseError(path + ": offset " + std::to_string(16 + i * 13) +
                             ": truncated record " + std::to_string(i));
        }
        e.p = static_cast<std::int8_t>(p);
        if (e.p != 1 && e.p != -1)
            throw ParseError(path + ": record " + std::to_string(i) + ": bad polarity");
        check_bounds(e, cloud.sensor_width, cloud.sensor_height,
                     path + ": record " + std::to_string(i));
        cloud.events.push_back(e);
    }
    sort_by_time(cloud);
    return cloud;
}

} // namespace

void validate(const EventCloud& cloud) {
    if (cloud.sensor_width == 0 || cloud.sensor_height == 0)
        throw ValidationError("cloud has zero sensor bounds");
    std::uint64_t last_t = 0;
    for (std::size_t i = 0; i < cloud.events.size(); ++i) {
        const Event& e = cloud.events[i];
        check_bounds(e, cloud.sensor_width, cloud.sensor_height, "event " + std::to_string(i));
        if (e.p != 1 && e.p != -1)
            throw ValidationError("event " + std::to_string(i) + ": polarity not in {+1,-1}");
        if (e.t < last_t)
            throw ValidationError("event " + std::to_string(i) + ": timestamps decrease");
        last_t = e.t;
    }
}

EventCloud read_events(const std::string& path, EventFormat format,
                       std::uint16_t sensor_width, std::uint16_t sensor_height) {
    return format == EventFormat::Csv ? read_csv(path, sensor_width, sensor_height)
                                      : read_binary(path);
}

void write_events(const EventCloud& cloud, const std::string& path, EventFormat format) {
    if (format == EventFormat::Csv) {
        std::ofstream os(path);
        if (!os) throw IoError("cannot write " + path);
        os << "# x,y,t,p\n";
        for (const Event& e : cloud.events)
            os << e.x << ',' << e.y << ',' << e.t << ',' << int(e.p) << '\n';
        if (!os) throw IoError("write failed: " + path);
        return;
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    os.write(kMagic, 4);
    put_u16(os, cloud.sensor_width);
    put_u16(os, cloud.sensor_height);
    put_u64(os, cloud.events.size());
    for (const Event& e : cloud.events) {
        put_u16(os, e.x);
        put_u16(os, e.y);
        put_u64(os, e.t);
        const char p = static_cast<char>(e.p);
        os.write(&p, 1);
    }
    if (!os) throw IoError("write failed: " + path);
}

namespace {

struct Pose {
    double cx, cy;  // disc centre
    double dx, dy;  // unit motion direction
};

// Trajectory families: 0 horizontal sweep, 1 vertical sweep, 2 clockwise
// orbit, 3 counter-clockwise orbit (higher classes cycle through the four
// with a different starting phase). tau in [0,1].
Pose pose_at(int class_id, double tau, double phase, const SynthConfig& cfg) {
    const double w = cfg.sensor_width;
    const double h = cfg.sensor_height;
    const double margin = cfg.pattern_radius + 2.0;
    const int family = class_id % 4;
    Pose p{};
    if (family == 0 || family == 1) {
        double s = cfg.speed * tau + phase;
        s -= std::floor(s);  // wrap the sweep
        if (family == 0) {
            p.cx = margin + (w - 2.0 * margin) * s;
            p.cy = h / 2.0;
            p.dx = 1.0;
            p.dy = 0.0;
        } else {
            p.cx = w / 2.0;
            p.cy = margin + (h - 2.0 * margin) * s;
            p.dx = 0.0;
            p.dy = 1.0;
        }
    } else {
        const double orbit = std::max(2.0, std::min(w, h) / 2.0 - margin);
        const double sign = family == 2 ? -1.0 : 1.0;  // 2 = clockwise
        // Quarter-turn phase jitter: enough per-sample variety without making
        // the two orbit classes mirror images of each other in distribution.
        const double phi = phase * 0.25 * kTwoPi + sign * cfg.speed * kTwoPi * tau;
        p.cx = w / 2.0 + orbit * std::cos(phi);
        p.cy = h / 2.0 + orbit * std::sin(phi);
        p.dx = -sign * std::sin(phi);  // unit tangent of the orbit
        p.dy = sign * std::cos(phi);
    }
    return p;
}

std::uint16_t clamp_pix(double v, std::uint16_t upper) {
    const double c = std::max(0.0, std::min(v, static_cast<double>(upper - 1)));
    return static_cast<std::uint16_t>(std::llround(c));
}

} // namespace

EventCloud generate_synthetic(int class_id, const SynthConfig& config, std::uint64_t seed) {
    if (class_id < 0 || class_id >= config.num_classes)
        throw ValidationError("generate_synthetic: class_id " + std::to_string(class_id) +
                              " out of range for " + std::to_string(config.num_classes) +
                              " classes");
    EventCloud cloud;
    cloud.sensor_width = config.sensor_width;
    cloud.sensor_height = config.sensor_height;
    cloud.label = class_id;

    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(class_id), 0xE5));
    const int n_noise = static_cast<int>(std::llround(config.noise_rate * config.events_per_sample));
    const int n_signal = config.speed == 0.0 ? 0 : config.events_per_sample - n_noise;
    const double phase = rng.unit();

    cloud.events.reserve(static_cast<std::size_t>(std::max(0, n_signal + n_noise)));
    for (int i = 0; i < n_signal; ++i) {
        // Stratified times keep event density even along the trajectory.
        const double tau = (i + rng.unit()) / n_signal;
        const Pose pose = pose_at(class_id, tau, phase, config);
        const double theta = rng.range(0.0, kTwoPi);
        const double r = config.pattern_radius + rng.range(-1.0, 1.0);
        const double nx = std::cos(theta);
        const double ny = std::sin(theta);
        Event e;
        e.x = clamp_pix(pose.cx + r * nx, config.sensor_width);
        e.y = clamp_pix(pose.cy + r * ny, config.sensor_height);
        e.t = static_cast<std::uint64_t>(std::llround(tau * static_cast<double>(config.duration_us)));
        e.p = (nx * pose.dx + ny * pose.dy) > 0.0 ? 1 : -1;  // leading edge brightens
        cloud.events.push_back(e);
    }
    for (int i = 0; i < n_noise; ++i) {
        Event e;
        e.x = static_cast<std::uint16_t>(rng.below(config.sensor_width));
        e.y = static_cast<std::uint16_t>(rng.below(config.sensor_height));
        e.t = rng.below(config.duration_us + 1);
        e.p = rng.below(2) == 0 ? 1 : -1;
        cloud.events.push_back(e);
    }
    std::stable_sort(cloud.events.begin(), cloud.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    return cloud;
}

std::vector<int> DatasetManifest::indices(Split split) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].split == split) out.push_back(static_cast<int>(i));
    return out;
}

std::string DatasetManifest::sample_path(int index) const {
    const std::filesystem::path p(samples[index].path);
    if (p.is_absolute() || base_dir.empty()) return p.string();
    return (std::filesystem::path(base_dir) / p).string();
}

void DatasetManifest::validate() const {
    if (num_classes < 2) throw ValidationError("manifest: num_classes must be >= 2");
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].label < 0 || samples[i].label >= num_classes)
            throw ValidationError("manifest: sample " + std::to_string(i) +
                                  " label out of range");
    }
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    DatasetManifest m;
    try {
        m.name = j.at("name").get<std::string>();
        m.num_classes = j.at("num_classes").get<int>();
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& s : j.at("samples")) {
            ManifestEntry e;
            e.path = s.at("path").get<std::string>();
            e.label = s.at("label").get<int>();
            const std::string split = s.at("split").get<std::string>();
            if (split != "train" && split != "test")
                throw ParseError(path + ": split must be 'train' or 'test'");
            e.split = split == "train" ? Split::Train : Split::Test;
            m.samples.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    m.base_dir = std::filesystem::path(path).parent_path().string();
    m.validate();
    return m;
}

void DatasetManifest::save(const std::string& path) const {
    validate();
    nlohmann::json j;
    j["name"] = name;
    j["num_classes"] = num_classes;
    j["seed"] = seed;
    j["samples"] = nlohmann::json::array();
    for (const auto& s : samples) {
        j["samples"].push_back({{"path", s.path},
                                {"label", s.label},
                                {"split", s.split == Split::Train ? "train" : "test"}});
    }
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << j.dump(2) << '\n';
}

} // namespace evagc
