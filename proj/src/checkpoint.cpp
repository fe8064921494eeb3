#include "x2edit/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "x2edit/error.hpp"

namespace x2edit {

namespace {

void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void quantize_f32(Tensor& t) {
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = static_cast<double>(static_cast<float>(t[i]));
    }
}

void save_checkpoint(const std::string& path, const std::vector<TensorEntry>& tensors,
                     const nlohmann::json& metadata) {
    // canonical order: sorted tensor names
    std::map<std::string, Tensor*> sorted;
    for (const TensorEntry& e : tensors) {
        if (e.name == "__metadata__") {
            throw FormatError("tensor name __metadata__ is reserved");
        }
        if (!sorted.emplace(e.name, e.tensor).second) {
            throw FormatError("duplicate tensor name: " + e.name);
        }
    }

    nlohmann::json header;
    header["__metadata__"] = metadata;
    std::uint64_t offset = 0;
    for (auto& [name, tensor] : sorted) {
        quantize_f32(*tensor);
        nlohmann::json entry;
        entry["shape"] = tensor->shape();
        entry["dtype"] = "f32";
        entry["offset"] = offset;
        header[name] = entry;
        offset += static_cast<std::uint64_t>(tensor->size()) * 4;
    }

    const std::string header_text = header.dump();
    std::string out;
    out.reserve(13 + header_text.size() + offset);
    out.append(kCheckpointMagic, 4);
    out.push_back(static_cast<char>(kCheckpointVersion));
    std::uint64_t hlen = header_text.size();
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((hlen >> (8 * i)) & 0xFF));
    }
    out += header_text;
    for (auto& [name, tensor] : sorted) {
        for (Index i = 0; i < tensor->size(); ++i) {
            const float f = static_cast<float>((*tensor)[i]);
            std::uint32_t bits = 0;
            std::memcpy(&bits, &f, 4);
            put_u32_le(out, bits);
        }
    }

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) {
        throw FormatError("cannot open checkpoint for writing: " + path);
    }
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) {
        throw FormatError("short write to checkpoint: " + path);
    }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw FormatError("cannot open checkpoint: " + path);
    }
    std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());

    if (data.size() < 13) {
        throw FormatError("truncated checkpoint at offset " + std::to_string(data.size()) +
                          ": missing preamble");
    }
    if (std::memcmp(data.data(), kCheckpointMagic, 4) != 0) {
        throw FormatError("bad magic at offset 0");
    }
    if (bytes[4] != kCheckpointVersion) {
        throw VersionError("unsupported checkpoint version " + std::to_string(bytes[4]));
    }
    const std::uint64_t hlen = get_u64_le(bytes + 5);
    if (13 + hlen > data.size()) {
        throw FormatError("truncated checkpoint at offset " + std::to_string(data.size()) +
                          ": header extends to " + std::to_string(13 + hlen));
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(data.begin() + 13,
                                       data.begin() + 13 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed header JSON at offset 13: ") + e.what());
    }

    const std::uint64_t payload_start = 13 + hlen;
    const std::uint64_t payload_size = data.size() - payload_start;

    LoadedCheckpoint loaded;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") {
            loaded.metadata = it.value();
            continue;
        }
        const nlohmann::json& entry = it.value();
        if (!entry.is_object() || !entry.contains("shape") || !entry.contains("dtype") ||
            !entry.contains("offset")) {
            throw FormatError("malformed tensor entry for '" + it.key() + "' at offset 13");
        }
        if (entry["dtype"] != "f32") {
            throw FormatError("unsupported dtype for '" + it.key() + "'");
        }
        std::vector<Index> shape = entry["shape"].get<std::vector<Index>>();
        const std::uint64_t off = entry["offset"].get<std::uint64_t>();
        Tensor t(shape);
        const std::uint64_t nbytes = static_cast<std::uint64_t>(t.size()) * 4;
        if (off + nbytes > payload_size) {
            throw FormatError("truncated checkpoint: tensor '" + it.key() +
                              "' ends at payload offset " + std::to_string(off + nbytes) +
                              " but payload has " + std::to_string(payload_size) + " bytes");
        }
        for (Index i = 0; i < t.size(); ++i) {
            const std::uint32_t bits =
                get_u32_le(bytes + payload_start + off + static_cast<std::uint64_t>(i) * 4);
            float f = 0.0f;
            std::memcpy(&f, &bits, 4);
            t[i] = static_cast<double>(f);
        }
        loaded.tensors.emplace(it.key(), std::move(t));
    }
    return loaded;
}

}  // namespace x2edit
