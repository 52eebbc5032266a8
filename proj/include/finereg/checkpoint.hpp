#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "finereg/model.hpp"
#include "finereg/tensor.hpp"

namespace finereg {

// Checkpoint archive: 8-byte magic, u64 manifest length, JSON manifest
// (sorted keys), then the concatenated float64 payloads in manifest order.
// Payload is little-endian IEEE-754; written bytes are bit-exact with the
// in-memory tensors, which is what the determinism tests compare.

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; big-endian hosts are unsupported");
static_assert(sizeof(double) == 8);

namespace ckpt {

inline constexpr char magic[8] = {'F', 'R', 'C', 'K', '0', '0', '0', '1'};

struct ParamRecord {
    std::string name;
    std::string role;
    std::vector<int> shape;
    std::optional<FilterLayout> filter_layout;
    bool trainable = true;
    bool rgn_eligible = false;
    Tensor values;
};

struct Archive {
    nlohmann::json meta; // free-form, model description and bookkeeping
    std::vector<ParamRecord> params;
};

inline void write(const Archive& a, const std::filesystem::path& path) {
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["meta"] = a.meta;
    nlohmann::json plist = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& p : a.params) {
        nlohmann::json e;
        e["count"] = p.values.numel();
        e["name"] = p.name;
        e["offset"] = offset;
        e["rgn_eligible"] = p.rgn_eligible;
        e["role"] = p.role;
        e["shape"] = p.shape;
        e["trainable"] = p.trainable;
        if (p.filter_layout)
            e["filter_layout"] = {{"c_in", p.filter_layout->c_in},
                                  {"c_out", p.filter_layout->c_out},
                                  {"f", p.filter_layout->f}};
        plist.push_back(e);
        offset += static_cast<std::uint64_t>(p.values.numel());
    }
    manifest["params"] = plist;
    const std::string mbytes = manifest.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path.string());
    f.write(magic, sizeof(magic));
    const std::uint64_t mlen = mbytes.size();
    f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    f.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
    for (const auto& p : a.params)
        f.write(reinterpret_cast<const char*>(p.values.v.data()),
                static_cast<std::streamsize>(p.values.v.size() * sizeof(double)));
    if (!f) throw std::runtime_error("checkpoint: write failed: " + path.string());
}

inline Archive read(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path.string());
    char got[8];
    f.read(got, sizeof(got));
    if (!f || std::memcmp(got, magic, sizeof(magic)) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    std::uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    std::string mbytes(mlen, '\0');
    f.read(mbytes.data(), static_cast<std::streamsize>(mlen));
    if (!f) throw std::runtime_error("checkpoint: truncated manifest in " + path.string());
    nlohmann::json manifest = nlohmann::json::parse(mbytes);
    if (manifest.at("format_version").get<int>() != 1)
        throw std::runtime_error("checkpoint: unsupported format version");

    Archive a;
    a.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& e : manifest.at("params")) {
        ParamRecord p;
        p.name = e.at("name").get<std::string>();
        p.role = e.at("role").get<std::string>();
        p.shape = e.at("shape").get<std::vector<int>>();
        p.trainable = e.at("trainable").get<bool>();
        p.rgn_eligible = e.at("rgn_eligible").get<bool>();
        if (e.contains("filter_layout")) {
            const auto& fl = e.at("filter_layout");
            p.filter_layout = FilterLayout{fl.at("c_in").get<int>(), fl.at("c_out").get<int>(),
                                           fl.at("f").get<int>()};
        }
        const auto count = e.at("count").get<long>();
        std::vector<double> data(static_cast<std::size_t>(count));
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!f) throw std::runtime_error("checkpoint: truncated payload in " + path.string());
        p.values = Tensor(p.shape, std::move(data));
        a.params.push_back(std::move(p));
    }
    return a;
}

inline Archive from_store(const ParamStore& store, nlohmann::json meta) {
    Archive a;
    a.meta = std::move(meta);
    for (const auto& p : store.all()) {
        ParamRecord r;
        r.name = p.name;
        r.role = role_name(p.role);
        r.shape = p.values.dims;
        r.filter_layout = p.filter_layout;
        r.trainable = p.trainable;
        r.rgn_eligible = p.rgn_eligible;
        r.values = p.values;
        a.params.push_back(std::move(r));
    }
    return a;
}

// Loads values (and flags) into an existing store; every record must match
// a registered param of the same shape.
inline void load_into_store(const Archive& a, ParamStore& store) {
    for (const auto& r : a.params) {
        ParamTensor& p = store.at(r.name);
        if (p.values.dims != r.shape)
            throw std::runtime_error("checkpoint: shape mismatch for '" + r.name + "'");
        p.values = r.values;
        p.trainable = r.trainable;
    }
}

} // namespace ckpt

inline void save_snapshot(const ModelSnapshot& snap, const std::filesystem::path& path) {
    ckpt::Archive a;
    a.meta = {{"kind", "snapshot"},
              {"seed", snap.meta().seed},
              {"step", snap.meta().step},
              {"tag", snap.meta().tag}};
    for (const auto& [name, values] : snap.values()) {
        ckpt::ParamRecord r;
        r.name = name;
        r.role = "backbone";
        r.shape = values.dims;
        r.values = values;
        a.params.push_back(std::move(r));
    }
    ckpt::write(a, path);
}

inline ModelSnapshot load_snapshot(const std::filesystem::path& path) {
    ckpt::Archive a = ckpt::read(path);
    std::map<std::string, Tensor> values;
    for (auto& r : a.params) values[r.name] = std::move(r.values);
    SnapshotMeta meta;
    meta.tag = a.meta.value("tag", "");
    meta.step = a.meta.value("step", 0L);
    meta.seed = a.meta.value("seed", 0ULL);
    return ModelSnapshot(std::move(values), std::move(meta));
}

} // namespace finereg
