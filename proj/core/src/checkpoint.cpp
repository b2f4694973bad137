#include "tinyprune/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "tinyprune/error.hpp"

namespace tinyprune {

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace {

constexpr std::uint32_t kMagic = 0x5450434bu;  // "TPCK"
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw Error("checkpoint: truncated file");
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
    const auto n = get<std::uint64_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw Error("checkpoint: truncated file");
    return s;
}

void put_tensor(std::ostream& os, const Tensor& t) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

Tensor get_tensor(std::istream& is) {
    const auto rank = get<std::uint32_t>(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = get<std::int32_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!is) throw Error("checkpoint: truncated tensor");
    return t;
}

void put_params(std::ostream& os, const ModelParams& p) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.nodes.size()));
    for (const NodeParams& n : p.nodes) {
        put<std::uint8_t>(os, n.has_bn ? 1 : 0);
        put_tensor(os, n.w);
        put_tensor(os, n.b);
        put_tensor(os, n.gamma);
        put_tensor(os, n.beta);
        put_tensor(os, n.run_mean);
        put_tensor(os, n.run_var);
    }
}

ModelParams get_params(std::istream& is) {
    ModelParams p;
    p.nodes.resize(get<std::uint32_t>(is));
    for (NodeParams& n : p.nodes) {
        n.has_bn = get<std::uint8_t>(is) != 0;
        n.w = get_tensor(is);
        n.b = get_tensor(is);
        n.gamma = get_tensor(is);
        n.beta = get_tensor(is);
        n.run_mean = get_tensor(is);
        n.run_var = get_tensor(is);
    }
    return p;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("checkpoint: cannot open '" + path + "' for writing");
    put(os, kMagic);
    put(os, kVersion);
    put(os, ck.spec_hash);
    put<std::int32_t>(os, ck.epoch);
    put<std::int64_t>(os, ck.step);
    put<std::uint8_t>(os, ck.frozen ? 1 : 0);
    put<std::uint8_t>(os, ck.materialized ? 1 : 0);

    put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.v.size()));
    for (double x : ck.v) put(os, x);

    put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.masks.by_group.size()));
    for (const auto& m : ck.masks.by_group) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(m.size()));
        os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size()));
    }

    put_params(os, ck.params);
    put_params(os, ck.momenta);

    put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.norm_mean.size()));
    os.write(reinterpret_cast<const char*>(ck.norm_mean.data()),
             static_cast<std::streamsize>(ck.norm_mean.size() * sizeof(float)));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.norm_std.size()));
    os.write(reinterpret_cast<const char*>(ck.norm_std.data()),
             static_cast<std::streamsize>(ck.norm_std.size() * sizeof(float)));

    put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.rng_states.size()));
    for (const auto& [k, v] : ck.rng_states) {
        put_string(os, k);
        put_string(os, v);
    }
    put_string(os, ck.model_spec);
    if (!os) throw Error("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("checkpoint: cannot open '" + path + "'");
    if (get<std::uint32_t>(is) != kMagic) throw Error("checkpoint: bad magic in '" + path + "'");
    const auto version = get<std::uint32_t>(is);
    if (version != kVersion)
        throw Error("checkpoint: unsupported version " + std::to_string(version));

    Checkpoint ck;
    ck.spec_hash = get<std::uint64_t>(is);
    ck.epoch = get<std::int32_t>(is);
    ck.step = get<std::int64_t>(is);
    ck.frozen = get<std::uint8_t>(is) != 0;
    ck.materialized = get<std::uint8_t>(is) != 0;

    ck.v.resize(get<std::uint32_t>(is));
    for (double& x : ck.v) x = get<double>(is);

    ck.masks.by_group.resize(get<std::uint32_t>(is));
    for (auto& m : ck.masks.by_group) {
        m.resize(get<std::uint32_t>(is));
        is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size()));
        if (!is) throw Error("checkpoint: truncated masks");
    }

    ck.params = get_params(is);
    ck.momenta = get_params(is);

    ck.norm_mean.resize(get<std::uint32_t>(is));
    is.read(reinterpret_cast<char*>(ck.norm_mean.data()),
            static_cast<std::streamsize>(ck.norm_mean.size() * sizeof(float)));
    ck.norm_std.resize(get<std::uint32_t>(is));
    is.read(reinterpret_cast<char*>(ck.norm_std.data()),
            static_cast<std::streamsize>(ck.norm_std.size() * sizeof(float)));
    if (!is) throw Error("checkpoint: truncated normalization stats");

    const auto nrng = get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < nrng; ++i) {
        std::string k = get_string(is);
        ck.rng_states[k] = get_string(is);
    }
    ck.model_spec = get_string(is);
    return ck;
}

}  // namespace tinyprune
