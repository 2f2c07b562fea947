#include "grounddiff/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "grounddiff/errors.hpp"

namespace grounddiff {

namespace {

constexpr char kMagic[8] = {'G', 'D', 'C', 'K', 'P', 'T', '0', '\0'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.append(s);
}

void put_floats(std::string& out, const std::vector<float>& v) {
    put_u64(out, v.size());
    for (float x : v) put_f32(out, x);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    explicit Reader(const std::string& b) : buf(b) {}

    void need(size_t n) const {
        if (pos + n > buf.size()) throw IoError("checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    std::vector<float> floats() {
        const uint64_t n = u64();
        need(n * 4);
        std::vector<float> v(static_cast<size_t>(n));
        for (auto& x : v) x = f32();
        return v;
    }
};

void put_tensor_list(std::string& out, const ParamList<float>& list, bool frozen) {
    for (const auto& [name, t] : list) {
        put_str(out, name);
        out.push_back(frozen ? 1 : 0);
        put_u32(out, static_cast<uint32_t>(t.shape().size()));
        for (int64_t d : t.shape()) put_u64(out, static_cast<uint64_t>(d));
        put_floats(out, t.data());
    }
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& canonical_config,
                     const ParameterPartition<float>& params, const TrainState& state) {
    std::string out;
    out.append(kMagic, 8);
    put_u32(out, kVersion);
    put_str(out, canonical_config);
    put_u64(out, static_cast<uint64_t>(state.step));
    const auto rs = state.rng.state();
    for (uint64_t w : rs) put_u64(out, w);

    put_u32(out, static_cast<uint32_t>(params.frozen.size() + params.trainable.size()));
    put_tensor_list(out, params.frozen, true);
    put_tensor_list(out, params.trainable, false);

    put_u64(out, static_cast<uint64_t>(state.adam.step));
    put_u32(out, static_cast<uint32_t>(state.adam.m.size()));
    for (size_t i = 0; i < state.adam.m.size(); ++i) {
        put_floats(out, state.adam.m[i]);
        put_floats(out, state.adam.v[i]);
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("checkpoint: write failed for " + path);
}

std::string load_checkpoint(const std::string& path, ParameterPartition<float>& params,
                            TrainState& state, const std::string& expected_config) {
    const std::string buf = read_file(path);
    Reader r(buf);
    r.need(8);
    if (std::memcmp(buf.data(), kMagic, 8) != 0)
        throw ConfigError("checkpoint: bad magic in " + path);
    r.pos = 8;
    const uint32_t version = r.u32();
    if (version != kVersion)
        throw ConfigError("checkpoint: format version " + std::to_string(version) +
                          " does not match expected " + std::to_string(kVersion));
    const std::string config = r.str();
    if (!expected_config.empty() && config != expected_config)
        throw ConfigError(
            "checkpoint: config digest mismatch; the checkpoint was produced by a different "
            "configuration and cannot be loaded against this one");

    state.step = static_cast<int64_t>(r.u64());
    std::array<uint64_t, 4> rs;
    for (auto& w : rs) w = r.u64();
    state.rng.set_state(rs);

    const uint32_t n_tensors = r.u32();
    if (n_tensors != params.frozen.size() + params.trainable.size())
        throw ConfigError("checkpoint: tensor count mismatch");
    auto read_into = [&](ParamList<float>& list, bool frozen) {
        for (auto& [name, t] : list) {
            const std::string got = r.str();
            if (got != name)
                throw ConfigError("checkpoint: tensor name mismatch: expected " + name +
                                  ", found " + got);
            r.need(1);
            const bool was_frozen = buf[r.pos++] != 0;
            if (was_frozen != frozen)
                throw ConfigError("checkpoint: partition role changed for " + name);
            const uint32_t ndim = r.u32();
            Shape shape(ndim);
            for (auto& d : shape) d = static_cast<int64_t>(r.u64());
            if (shape != t.shape())
                throw ConfigError("checkpoint: shape mismatch for " + name);
            auto data = r.floats();
            if (data.size() != t.data().size())
                throw ConfigError("checkpoint: data size mismatch for " + name);
            t.mutable_data() = std::move(data);
        }
    };
    read_into(params.frozen, true);
    read_into(params.trainable, false);

    state.adam.step = static_cast<int64_t>(r.u64());
    const uint32_t n_moments = r.u32();
    state.adam.m.clear();
    state.adam.v.clear();
    for (uint32_t i = 0; i < n_moments; ++i) {
        state.adam.m.push_back(r.floats());
        state.adam.v.push_back(r.floats());
    }
    if (!state.adam.m.empty() && state.adam.m.size() != params.trainable.size())
        throw ConfigError("checkpoint: optimizer moment count mismatch");
    return config;
}

std::string peek_checkpoint_config(const std::string& path) {
    const std::string buf = read_file(path);
    Reader r(buf);
    r.need(8);
    if (std::memcmp(buf.data(), kMagic, 8) != 0)
        throw ConfigError("checkpoint: bad magic in " + path);
    r.pos = 8;
    const uint32_t version = r.u32();
    if (version != kVersion)
        throw ConfigError("checkpoint: format version " + std::to_string(version) +
                          " does not match expected " + std::to_string(kVersion));
    return r.str();
}

}  // namespace grounddiff
