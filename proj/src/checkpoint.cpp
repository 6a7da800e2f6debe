#include "cmgen/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "cmgen/errors.hpp"

namespace cmgen {

namespace {

constexpr char kMagic[4] = {'C', 'M', 'G', 'C'};
constexpr uint32_t kVersion = 1;

void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}

void write_string(std::ostream& os, const std::string& s) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

void write_doubles(std::ostream& os, const std::vector<double>& v) {
    write_pod<uint64_t>(os, v.size());
    write_bytes(os, v.data(), v.size() * sizeof(double));
}

void read_bytes(std::istream& is, void* p, size_t n, const std::string& path) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n)
        throw IoError("checkpoint " + path + " is truncated");
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
    T v;
    read_bytes(is, &v, sizeof(T), path);
    return v;
}

std::string read_string(std::istream& is, const std::string& path) {
    uint32_t n = read_pod<uint32_t>(is, path);
    std::string s(n, '\0');
    if (n) read_bytes(is, s.data(), n, path);
    return s;
}

std::vector<double> read_doubles(std::istream& is, const std::string& path) {
    uint64_t n = read_pod<uint64_t>(is, path);
    std::vector<double> v(n);
    if (n) read_bytes(is, v.data(), n * sizeof(double), path);
    return v;
}

void write_rng_state(std::ostream& os, const std::array<uint64_t, 4>& s) {
    for (uint64_t w : s) write_pod<uint64_t>(os, w);
}

std::array<uint64_t, 4> read_rng_state(std::istream& is, const std::string& path) {
    std::array<uint64_t, 4> s{};
    for (auto& w : s) w = read_pod<uint64_t>(is, path);
    return s;
}

} // namespace

void save_checkpoint(const std::string& path, const Model& model,
                     const TrainerSnapshot* trainer) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path);
    write_bytes(f, kMagic, 4);
    write_pod<uint32_t>(f, kVersion);
    write_string(f, model.config().to_json());
    write_pod<uint8_t>(f, trainer ? 1 : 0);
    const auto& params = model.parameters();
    write_pod<uint64_t>(f, params.size());
    for (const auto& [name, tensor] : params) {
        write_string(f, name);
        const Shape& shape = tensor.shape();
        write_pod<uint32_t>(f, static_cast<uint32_t>(shape.size()));
        for (size_t d : shape) write_pod<uint64_t>(f, d);
        write_doubles(f, tensor.values());
    }
    if (trainer) {
        write_pod<double>(f, trainer->adam.lr);
        write_pod<double>(f, trainer->adam.beta1);
        write_pod<double>(f, trainer->adam.beta2);
        write_pod<double>(f, trainer->adam.eps);
        write_pod<uint64_t>(f, trainer->adam.step);
        write_pod<uint64_t>(f, trainer->adam.m.size());
        for (size_t i = 0; i < trainer->adam.m.size(); ++i) {
            write_doubles(f, trainer->adam.m[i]);
            write_doubles(f, trainer->adam.v[i]);
        }
        write_rng_state(f, trainer->dropout_state);
        write_rng_state(f, trainer->noise_state);
        write_rng_state(f, trainer->order_state);
        write_pod<uint64_t>(f, trainer->next_epoch);
        write_pod<double>(f, trainer->best_val);
        write_pod<uint8_t>(f, trainer->has_best ? 1 : 0);
        write_pod<uint64_t>(f, trainer->epochs_since_best);
    }
    if (!f) throw IoError("failed while writing checkpoint " + path);
}

ModelConfig read_checkpoint_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint " + path);
    char magic[4];
    read_bytes(f, magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw CompatibilityError(path + " is not a checkpoint (bad magic)");
    uint32_t version = read_pod<uint32_t>(f, path);
    if (version != kVersion)
        throw CompatibilityError(path + " uses format version " +
                                 std::to_string(version) + ", expected " +
                                 std::to_string(kVersion));
    return ModelConfig::from_json(read_string(f, path));
}

Model load_checkpoint(const std::string& path, const ModelConfig* expected_switches,
                      TrainerSnapshot* trainer_out, bool* has_trainer_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint " + path);
    char magic[4];
    read_bytes(f, magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw CompatibilityError(path + " is not a checkpoint (bad magic)");
    uint32_t version = read_pod<uint32_t>(f, path);
    if (version != kVersion)
        throw CompatibilityError(path + " uses format version " +
                                 std::to_string(version) + ", expected " +
                                 std::to_string(kVersion));
    ModelConfig cfg = ModelConfig::from_json(read_string(f, path));
    if (expected_switches) {
        std::string mismatches;
        if (cfg.persona_mode != expected_switches->persona_mode)
            mismatches += " persona_mode";
        if (cfg.speaker_id_on != expected_switches->speaker_id_on)
            mismatches += " speaker_id_on";
        if (cfg.alignment_on != expected_switches->alignment_on)
            mismatches += " alignment_on";
        if (cfg.fame_on != expected_switches->fame_on) mismatches += " fame_on";
        if (!mismatches.empty())
            throw CompatibilityError("checkpoint " + path +
                                     " disagrees with requested switches:" + mismatches);
    }
    bool has_trainer = read_pod<uint8_t>(f, path) != 0;
    if (has_trainer_out) *has_trainer_out = has_trainer;

    Rng scratch(0);
    Model model(cfg, scratch);
    auto& params = model.parameters();
    uint64_t count = read_pod<uint64_t>(f, path);
    if (count != params.size())
        throw CompatibilityError("checkpoint " + path + " holds " +
                                 std::to_string(count) + " parameters, model has " +
                                 std::to_string(params.size()));
    for (uint64_t i = 0; i < count; ++i) {
        std::string name = read_string(f, path);
        uint32_t rank = read_pod<uint32_t>(f, path);
        Shape shape(rank);
        for (auto& d : shape) d = read_pod<uint64_t>(f, path);
        std::vector<double> values = read_doubles(f, path);
        Tensor t = model.parameter(name);  // IndexError if the name is unknown
        if (t.shape() != shape || t.size() != values.size())
            throw CompatibilityError("checkpoint " + path + ": parameter " + name +
                                     " has shape " + shape_str(shape) +
                                     ", model expects " + shape_str(t.shape()));
        t.mutable_values() = std::move(values);
    }
    if (has_trainer && trainer_out) {
        TrainerSnapshot snap;
        snap.adam.lr = read_pod<double>(f, path);
        snap.adam.beta1 = read_pod<double>(f, path);
        snap.adam.beta2 = read_pod<double>(f, path);
        snap.adam.eps = read_pod<double>(f, path);
        snap.adam.step = read_pod<uint64_t>(f, path);
        uint64_t n = read_pod<uint64_t>(f, path);
        snap.adam.m.resize(n);
        snap.adam.v.resize(n);
        for (uint64_t i = 0; i < n; ++i) {
            snap.adam.m[i] = read_doubles(f, path);
            snap.adam.v[i] = read_doubles(f, path);
        }
        snap.dropout_state = read_rng_state(f, path);
        snap.noise_state = read_rng_state(f, path);
        snap.order_state = read_rng_state(f, path);
        snap.next_epoch = read_pod<uint64_t>(f, path);
        snap.best_val = read_pod<double>(f, path);
        snap.has_best = read_pod<uint8_t>(f, path) != 0;
        snap.epochs_since_best = read_pod<uint64_t>(f, path);
        *trainer_out = std::move(snap);
    }
    return model;
}

} // namespace cmgen
