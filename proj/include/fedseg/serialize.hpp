#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace fedseg {

using json = nlohmann::json;

// One named float64 array inside an archive. `flags` is a small bitfield the
// caller interprets (the checkpoint code uses it for the norm/buffer split).
struct ArrayEntry {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<double> values;
    uint8_t flags = 0;
};

struct Archive {
    json meta;
    std::vector<ArrayEntry> entries;

    const ArrayEntry& at(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return e;
        throw std::runtime_error("archive: no entry named '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return true;
        return false;
    }
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "archive format assumes a little-endian host");

inline void put_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline uint64_t get_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw std::runtime_error("archive: truncated file");
    return v;
}

constexpr char kMagic[8] = {'F', 'S', 'E', 'G', 'A', 'R', 'R', '1'};

}  // namespace detail

inline void write_archive(const std::filesystem::path& path, const Archive& ar) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os.write(detail::kMagic, 8);
    const std::string meta = ar.meta.dump();
    detail::put_u64(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    detail::put_u64(os, ar.entries.size());
    for (const auto& e : ar.entries) {
        detail::put_u64(os, e.name.size());
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        os.put(static_cast<char>(e.flags));
        detail::put_u64(os, e.shape.size());
        for (int64_t d : e.shape) detail::put_u64(os, static_cast<uint64_t>(d));
        size_t numel = 1;
        for (int64_t d : e.shape) numel *= static_cast<size_t>(d);
        if (numel != e.values.size())
            throw std::runtime_error("archive: entry '" + e.name + "' shape/value size mismatch");
        os.write(reinterpret_cast<const char*>(e.values.data()),
                 static_cast<std::streamsize>(e.values.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("archive: write failed for " + path.string());
}

inline Archive read_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kMagic, 8) != 0)
        throw std::runtime_error("not an archive file: " + path.string());
    Archive ar;
    uint64_t meta_len = detail::get_u64(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    ar.meta = meta.empty() ? json::object() : json::parse(meta);
    uint64_t n = detail::get_u64(is);
    ar.entries.resize(n);
    for (auto& e : ar.entries) {
        uint64_t name_len = detail::get_u64(is);
        e.name.resize(name_len);
        is.read(e.name.data(), static_cast<std::streamsize>(name_len));
        int c = is.get();
        if (c == EOF) throw std::runtime_error("archive: truncated file");
        e.flags = static_cast<uint8_t>(c);
        uint64_t rank = detail::get_u64(is);
        e.shape.resize(rank);
        size_t numel = 1;
        for (auto& d : e.shape) {
            d = static_cast<int64_t>(detail::get_u64(is));
            numel *= static_cast<size_t>(d);
        }
        e.values.resize(numel);
        is.read(reinterpret_cast<char*>(e.values.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (!is) throw std::runtime_error("archive: truncated entry '" + e.name + "'");
    }
    return ar;
}

// --- config parsing helpers -------------------------------------------------

// Field lookup that reports the JSON path on failure, so misconfigurations
// point at the offending key.
inline const json& require_field(const json& j, const std::string& key, const std::string& where) {
    if (!j.is_object() || !j.contains(key))
        throw std::runtime_error("config error at " + where + ": missing required field '" + key + "'");
    return j.at(key);
}

template <typename T>
T field_or(const json& j, const std::string& key, T fallback) {
    if (j.is_object() && j.contains(key)) return j.at(key).get<T>();
    return fallback;
}

inline json load_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file: " + path.string());
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config parse error in " + path.string() + ": " + e.what());
    }
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << j.dump(2) << "\n";
}

// Deterministic text form for doubles (round-trips exactly in binary64).
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace fedseg
