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
#include <zlib.h>

#include "errors.hpp"
#include "tensor.hpp"

namespace actionpp {

    static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

    inline constexpr char kCheckpointMagic[4] = {'A', 'C', 'P', 'P'};
    inline constexpr std::uint32_t kCheckpointVersion = 1;

    // Container layout:
    //   "ACPP" | u32 version | u64 header length | JSON header | payloads | u32 CRC-32
    // The header lists tensors in payload order with shape, dtype and byte
    // offset (relative to the first payload byte), plus a free-form "meta"
    // object. All integers and doubles are little-endian.
    struct Checkpoint {
        std::map<std::string, Tensor> tensors;
        nlohmann::json meta = nlohmann::json::object();

        const Tensor& tensor(const std::string& name) const {
            auto it = tensors.find(name);
            if (it == tensors.end()) throw CorruptFile("checkpoint has no tensor " + name);
            return it->second;
        }

        friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
    };

    namespace detail {

        template <typename T>
        void put(std::string& out, T v) {
            char buf[sizeof(T)];
            std::memcpy(buf, &v, sizeof(T));
            out.append(buf, sizeof(T));
        }

        template <typename T>
        T get(const std::string& in, std::size_t pos) {
            T v;
            std::memcpy(&v, in.data() + pos, sizeof(T));
            return v;
        }

        inline std::uint32_t crc32_of(const char* data, std::size_t n) {
            uLong crc = crc32(0L, Z_NULL, 0);
            while (n > 0) {
                const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
                crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
                data += chunk;
                n -= chunk;
            }
            return static_cast<std::uint32_t>(crc);
        }

    } // namespace detail

    inline std::string encode_checkpoint(const Checkpoint& ckpt, std::uint32_t version = kCheckpointVersion) {
        nlohmann::json header;
        header["meta"] = ckpt.meta;
        header["tensors"] = nlohmann::json::array();
        std::uint64_t offset = 0;
        for (const auto& [name, t] : ckpt.tensors) {
            const std::uint64_t nbytes = t.numel() * sizeof(double);
            header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "float64"}, {"offset", offset},
                                         {"nbytes", nbytes}});
            offset += nbytes;
        }
        const std::string text = header.dump();
        std::string out(kCheckpointMagic, 4);
        detail::put<std::uint32_t>(out, version);
        detail::put<std::uint64_t>(out, text.size());
        out += text;
        for (const auto& [name, t] : ckpt.tensors) {
            out.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(double));
        }
        detail::put<std::uint32_t>(out, detail::crc32_of(out.data(), out.size()));
        return out;
    }

    inline Checkpoint decode_checkpoint(const std::string& bytes) {
        constexpr std::size_t kPrefix = 4 + 4 + 8;
        if (bytes.size() < kPrefix + 4) throw CorruptFile("checkpoint truncated");
        if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw CorruptFile("bad magic bytes");
        const auto stored_crc = detail::get<std::uint32_t>(bytes, bytes.size() - 4);
        if (detail::crc32_of(bytes.data(), bytes.size() - 4) != stored_crc) throw CorruptFile("CRC-32 mismatch");
        const auto version = detail::get<std::uint32_t>(bytes, 4);
        if (version != kCheckpointVersion) {
            throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " +
                                  std::to_string(kCheckpointVersion));
        }
        const auto header_len = detail::get<std::uint64_t>(bytes, 8);
        if (header_len > bytes.size() - kPrefix - 4) throw CorruptFile("header length exceeds file");
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(bytes.begin() + kPrefix, bytes.begin() + kPrefix + static_cast<long>(header_len));
        } catch (const nlohmann::json::exception& e) {
            throw CorruptFile(std::string("unreadable header: ") + e.what());
        }
        const std::size_t payload = kPrefix + header_len;
        const std::size_t payload_len = bytes.size() - 4 - payload;
        Checkpoint ckpt;
        try {
            ckpt.meta = header.at("meta");
            std::uint64_t expected = 0;
            for (const auto& entry : header.at("tensors")) {
                const auto name = entry.at("name").get<std::string>();
                const auto shape = entry.at("shape").get<Shape>();
                const auto offset = entry.at("offset").get<std::uint64_t>();
                const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
                if (entry.at("dtype") != "float64") throw CorruptFile("unsupported dtype for " + name);
                if (offset != expected || nbytes != shape_numel(shape) * sizeof(double) || offset + nbytes > payload_len) {
                    throw CorruptFile("inconsistent extent for tensor " + name);
                }
                std::vector<double> data(shape_numel(shape));
                std::memcpy(data.data(), bytes.data() + payload + offset, nbytes);
                ckpt.tensors.emplace(name, Tensor(shape, std::move(data)));
                expected = offset + nbytes;
            }
            if (expected != payload_len) throw CorruptFile("payload length mismatch");
        } catch (const nlohmann::json::exception& e) {
            throw CorruptFile(std::string("malformed header: ") + e.what());
        } catch (const ShapeMismatch& e) {
            throw CorruptFile(std::string("bad tensor shape: ") + e.what());
        }
        return ckpt;
    }

    inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
        if (path.has_parent_path()) {
            std::error_code ec;
            std::filesystem::create_directories(path.parent_path(), ec);
        }
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + path.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + path.string());
    }

    inline std::string read_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open " + path.string());
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return bytes;
    }

    inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
        write_file(path, encode_checkpoint(ckpt));
    }

    inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

} // namespace actionpp
