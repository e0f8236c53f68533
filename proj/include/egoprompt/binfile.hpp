#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "egoprompt/crc32.hpp"
#include "egoprompt/errors.hpp"

namespace egoprompt {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

using Json = nlohmann::json;

/// Container shared by checkpoints and datasets:
///   [u64 manifest length][u32 manifest crc32][manifest JSON][binary blob]
/// The manifest carries a `sections` registry (name, dtype, shape, offset,
/// nbytes, crc32) describing the blob. Any single-byte corruption is caught
/// by the manifest or section checksums.
class BinFileWriter {
public:
    explicit BinFileWriter(Json manifest_extra) : manifest_(std::move(manifest_extra)) {}

    void add_f32(const std::string& name, std::vector<std::uint64_t> shape, const float* data,
                 std::size_t count) {
        add_section(name, "f32", std::move(shape), data, count * sizeof(float));
    }

    void add_i32(const std::string& name, std::vector<std::uint64_t> shape, const std::int32_t* data,
                 std::size_t count) {
        add_section(name, "i32", std::move(shape), data, count * sizeof(std::int32_t));
    }

    /// Serializes to bytes; `write` puts them on disk atomically.
    std::vector<char> bytes() const {
        Json manifest = manifest_;
        manifest["sections"] = sections_;
        manifest["blob_nbytes"] = blob_.size();
        const std::string text = manifest.dump();
        std::vector<char> out;
        out.reserve(12 + text.size() + blob_.size());
        const std::uint64_t len = text.size();
        const std::uint32_t crc = crc32(text.data(), text.size());
        out.insert(out.end(), reinterpret_cast<const char*>(&len), reinterpret_cast<const char*>(&len) + 8);
        out.insert(out.end(), reinterpret_cast<const char*>(&crc), reinterpret_cast<const char*>(&crc) + 4);
        out.insert(out.end(), text.begin(), text.end());
        out.insert(out.end(), blob_.begin(), blob_.end());
        return out;
    }

    void write(const std::string& path) const {
        const auto data = bytes();
        const std::string tmp = path + ".tmp";
        {
            std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
            if (!f) throw LoadError("cannot open '" + tmp + "' for writing");
            f.write(data.data(), static_cast<std::streamsize>(data.size()));
            if (!f) throw LoadError("short write to '" + tmp + "'");
        }
        std::filesystem::rename(tmp, path);
    }

private:
    void add_section(const std::string& name, const char* dtype, std::vector<std::uint64_t> shape,
                     const void* data, std::size_t nbytes) {
        Json s;
        s["name"] = name;
        s["dtype"] = dtype;
        s["shape"] = shape;
        s["offset"] = blob_.size();
        s["nbytes"] = nbytes;
        s["crc32"] = crc32(data, nbytes);
        sections_.push_back(std::move(s));
        const auto* p = static_cast<const char*>(data);
        blob_.insert(blob_.end(), p, p + nbytes);
    }

    Json manifest_;
    Json sections_ = Json::array();
    std::vector<char> blob_;
};

class BinFileReader {
public:
    explicit BinFileReader(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw LoadError("cannot open '" + path + "'");
        std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        init(std::move(raw), path);
    }

    const Json& manifest() const { return manifest_; }

    bool has_section(const std::string& name) const { return find(name) != nullptr; }

    std::vector<float> read_f32(const std::string& name) const {
        const Json* s = require(name, "f32");
        std::vector<float> out((*s)["nbytes"].get<std::size_t>() / sizeof(float));
        std::memcpy(out.data(), blob_.data() + (*s)["offset"].get<std::size_t>(),
                    (*s)["nbytes"].get<std::size_t>());
        return out;
    }

    std::vector<std::int32_t> read_i32(const std::string& name) const {
        const Json* s = require(name, "i32");
        std::vector<std::int32_t> out((*s)["nbytes"].get<std::size_t>() / sizeof(std::int32_t));
        std::memcpy(out.data(), blob_.data() + (*s)["offset"].get<std::size_t>(),
                    (*s)["nbytes"].get<std::size_t>());
        return out;
    }

    std::vector<std::uint64_t> section_shape(const std::string& name) const {
        const Json* s = find(name);
        if (!s) throw LoadError("missing section '" + name + "'");
        return (*s)["shape"].get<std::vector<std::uint64_t>>();
    }

private:
    void init(std::vector<char> raw, const std::string& path) {
        if (raw.size() < 12) throw LoadError("'" + path + "' is truncated (no header)");
        std::uint64_t len = 0;
        std::uint32_t crc = 0;
        std::memcpy(&len, raw.data(), 8);
        std::memcpy(&crc, raw.data() + 8, 4);
        if (len > raw.size() - 12) throw LoadError("'" + path + "' is truncated or corrupt (manifest length)");
        const std::string text(raw.data() + 12, raw.data() + 12 + len);
        if (crc32(text.data(), text.size()) != crc)
            throw LoadError("'" + path + "' failed the manifest checksum");
        try {
            manifest_ = Json::parse(text);
        } catch (const Json::exception& e) {
            throw LoadError("'" + path + "' has an unparseable manifest: " + e.what());
        }
        blob_.assign(raw.begin() + 12 + static_cast<std::ptrdiff_t>(len), raw.end());
        if (!manifest_.contains("sections") || !manifest_.contains("blob_nbytes"))
            throw LoadError("'" + path + "' manifest lacks a section registry");
        if (manifest_["blob_nbytes"].get<std::size_t>() != blob_.size())
            throw LoadError("'" + path + "' blob size mismatch: manifest declares " +
                            std::to_string(manifest_["blob_nbytes"].get<std::size_t>()) + ", file holds " +
                            std::to_string(blob_.size()));
        for (const auto& s : manifest_["sections"]) {
            const std::size_t off = s["offset"].get<std::size_t>();
            const std::size_t n = s["nbytes"].get<std::size_t>();
            if (off + n > blob_.size()) throw LoadError("'" + path + "' section out of bounds");
            if (crc32(blob_.data() + off, n) != s["crc32"].get<std::uint32_t>())
                throw LoadError("'" + path + "' section '" + s["name"].get<std::string>() +
                                "' failed its checksum");
        }
    }

    const Json* find(const std::string& name) const {
        for (const auto& s : manifest_["sections"])
            if (s["name"].get<std::string>() == name) return &s;
        return nullptr;
    }

    const Json* require(const std::string& name, const char* dtype) const {
        const Json* s = find(name);
        if (!s) throw LoadError("missing section '" + name + "'");
        if ((*s)["dtype"].get<std::string>() != dtype)
            throw LoadError("section '" + name + "' has dtype " + (*s)["dtype"].get<std::string>() +
                            ", expected " + dtype);
        return s;
    }

    Json manifest_;
    std::vector<char> blob_;
};

/// Atomic small-file write (JSON manifests, CSV reports).
inline void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw LoadError("cannot open '" + tmp + "' for writing");
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f) throw LoadError("short write to '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("cannot open '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline std::uint32_t file_crc32(const std::string& path) {
    const std::string data = read_file(path);
    return crc32(data.data(), data.size());
}

}  // namespace egoprompt
