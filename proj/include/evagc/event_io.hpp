#ifndef EVAGC_EVENT_IO_HPP
#define EVAGC_EVENT_IO_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace evagc {

// A single DVS event. Timestamps are integer microseconds; polarity is
// strictly +1 or -1.
struct Event {
    std::uint16_t x = 0;
    std::uint16_t y = 0;
    std::uint64_t t = 0;
    std::int8_t p = 1;

    bool operator==(const Event&) const = default;
};

// Ordered event stream plus sensor geometry. Events are kept sorted
// non-decreasing by timestamp.
struct EventCloud {
    std::vector<Event> events;
    std::uint16_t sensor_width = 0;
    std::uint16_t sensor_height = 0;
    std::optional<int> label;

    std::size_t size() const { return events.size(); }
    bool operator==(const EventCloud& o) const {
        return events == o.events && sensor_width == o.sensor_width &&
               sensor_height == o.sensor_height && label == o.label;
    }
};

enum class EventFormat { Csv, Binary };

// Throws ValidationError if any event breaks the cloud invariants
// (bounds, polarity, timestamp order).
void validate(const EventCloud& cloud);

// CSV rows are "x,y,t,p" with p in {-1,0,1} (0 maps to -1); '#' starts a
// comment line. Sensor bounds come from the caller for CSV and from the
// file header for the binary format. Unsorted rows are tolerated and
// stable-sorted by timestamp.
EventCloud read_events(const std::string& path, EventFormat format,
                       std::uint16_t sensor_width = 0, std::uint16_t sensor_height = 0);

void write_events(const EventCloud& cloud, const std::string& path, EventFormat format);

// Desk-scale stand-in for the benchmark datasets: a bright disc whose edge
// sweeps a class-dependent trajectory. Classes 0/1 translate horizontally/
// vertically, classes 2/3 orbit clockwise/counter-clockwise. Polarity
// follows the edge direction (leading edge brightens). Pure function of
// (class_id, config, seed).
struct SynthConfig {
    int num_classes = 4;
    std::uint16_t sensor_width = 64;
    std::uint16_t sensor_height = 64;
    std::uint64_t duration_us = 100000;
    int events_per_sample = 3000;
    double noise_rate = 0.05;     // fraction of events that are uniform noise
    double pattern_radius = 8.0;  // disc radius in pixels
    double speed = 1.0;           // trajectory speed scale; 0 freezes the pattern
};

EventCloud generate_synthetic(int class_id, const SynthConfig& config, std::uint64_t seed);

enum class Split { Train, Test };

struct ManifestEntry {
    std::string path;  // relative to the manifest file's directory
    int label = 0;
    Split split = Split::Train;
};

// JSON-backed dataset index. Schema: {"name", "num_classes", "seed",
// "samples": [{"path", "label", "split"}]}.
struct DatasetManifest {
    std::string name;
    int num_classes = 0;
    std::uint64_t seed = 0;
    std::vector<ManifestEntry> samples;
    std::string base_dir;  // set on load; not serialized

    std::vector<int> indices(Split split) const;
    std::string sample_path(int index) const;
    void validate() const;

    static DatasetManifest load(const std::string& path);
    void save(const std::string& path) const;
};

} // namespace evagc

#endif
