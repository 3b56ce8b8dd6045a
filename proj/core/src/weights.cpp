#include "transnetr/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "weight archives assume a little-endian host");

namespace transnetr {

namespace {
constexpr char kMagic[] = "TNRW0001";
}

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) {
    std::uint64_t hash = 0xCBF29CE484222325ull;
    for (std::size_t i = 0; i < size; ++i) {
        hash ^= data[i];
        hash *= 0x100000001B3ull;
    }
    return hash;
}

void WeightArchive::add_meta(std::string key, std::string value) {
    if (key.find_first_of(" \n") != std::string::npos ||
        value.find('\n') != std::string::npos) {
        throw std::invalid_argument("archive meta keys/values must not contain spaces or newlines: " +
                                    key);
    }
    meta.emplace_back(std::move(key), std::move(value));
}

void WeightArchive::add_tensor(std::string name, const Shape& shape, std::vector<float> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw std::invalid_argument("archive tensor '" + name + "' shape/data mismatch");
    }
    tensors.push_back(TensorEntry{std::move(name), shape, std::move(data)});
}

const WeightArchive::TensorEntry* WeightArchive::find_tensor(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

const std::string* WeightArchive::find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta) {
        if (k == key) return &v;
    }
    return nullptr;
}

void save_archive(const std::filesystem::path& path, const WeightArchive& archive) {
    std::ostringstream header;
    header << kMagic << "\n";
    for (const auto& [k, v] : archive.meta) header << "meta " << k << " " << v << "\n";

    std::uint64_t offset = 0;
    for (const auto& t : archive.tensors) {
        header << "tensor " << t.name << " " << t.shape.size();
        for (auto d : t.shape) header << " " << d;
        header << " " << offset << "\n";
        offset += t.data.size() * sizeof(float);
    }
    for (const auto& b : archive.blobs) {
        header << "blob " << b.name << " " << b.bytes.size() << " " << offset << "\n";
        offset += b.bytes.size();
    }
    header << "end\n";

    std::vector<std::uint8_t> payload;
    payload.reserve(offset);
    for (const auto& t : archive.tensors) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(t.data.data());
        payload.insert(payload.end(), p, p + t.data.size() * sizeof(float));
    }
    for (const auto& b : archive.blobs) payload.insert(payload.end(), b.bytes.begin(), b.bytes.end());

    const std::uint64_t checksum = fnv1a64(payload.data(), payload.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write archive: " + path.string());
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!out) throw std::runtime_error("failed writing archive: " + path.string());
}

WeightArchive load_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open archive: " + path.string());

    std::string line;
    if (!std::getline(in, line) || line != kMagic) {
        throw std::runtime_error("not a weight archive (bad magic): " + path.string());
    }

    WeightArchive archive;
    struct PendingTensor {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    struct PendingBlob {
        std::string name;
        std::uint64_t size, offset;
    };
    std::vector<PendingTensor> pending_tensors;
    std::vector<PendingBlob> pending_blobs;
    std::uint64_t payload_size = 0;

    bool saw_end = false;
    while (std::getline(in, line)) {
        if (line == "end") {
            saw_end = true;
            break;
        }
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "meta") {
            std::string key;
            ls >> key;
            std::string value;
            std::getline(ls, value);
            if (!value.empty() && value.front() == ' ') value.erase(0, 1);
            archive.meta.emplace_back(key, value);
        } else if (kind == "tensor") {
            PendingTensor t;
            std::size_t rank = 0;
            ls >> t.name >> rank;
            t.shape.resize(rank);
            for (auto& d : t.shape) ls >> d;
            ls >> t.offset;
            if (!ls) throw std::runtime_error("corrupt tensor header line in " + path.string());
            payload_size += static_cast<std::uint64_t>(shape_numel(t.shape)) * sizeof(float);
            pending_tensors.push_back(std::move(t));
        } else if (kind == "blob") {
            PendingBlob b;
            ls >> b.name >> b.size >> b.offset;
            if (!ls) throw std::runtime_error("corrupt blob header line in " + path.string());
            payload_size += b.size;
            pending_blobs.push_back(std::move(b));
        } else {
            throw std::runtime_error("unknown header entry '" + kind + "' in " + path.string());
        }
    }
    if (!saw_end) throw std::runtime_error("truncated archive header in " + path.string());

    std::vector<std::uint8_t> payload(payload_size);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (in.gcount() != static_cast<std::streamsize>(payload.size())) {
        throw std::runtime_error("truncated archive payload in " + path.string());
    }
    std::uint64_t stored_checksum = 0;
    in.read(reinterpret_cast<char*>(&stored_checksum), sizeof(stored_checksum));
    if (in.gcount() != sizeof(stored_checksum)) {
        throw std::runtime_error("truncated archive checksum in " + path.string());
    }
    if (fnv1a64(payload.data(), payload.size()) != stored_checksum) {
        throw std::runtime_error("archive integrity check failed for " + path.string());
    }

    for (const auto& t : pending_tensors) {
        const std::uint64_t bytes = static_cast<std::uint64_t>(shape_numel(t.shape)) * sizeof(float);
        if (t.offset + bytes > payload.size()) {
            throw std::runtime_error("tensor '" + t.name + "' overruns the payload in " + path.string());
        }
        std::vector<float> data(static_cast<std::size_t>(shape_numel(t.shape)));
        std::memcpy(data.data(), payload.data() + t.offset, bytes);
        archive.tensors.push_back(WeightArchive::TensorEntry{t.name, t.shape, std::move(data)});
    }
    for (const auto& b : pending_blobs) {
        if (b.offset + b.size > payload.size()) {
            throw std::runtime_error("blob '" + b.name + "' overruns the payload in " + path.string());
        }
        archive.blobs.push_back(WeightArchive::BlobEntry{
            b.name, std::vector<std::uint8_t>(payload.begin() + static_cast<std::ptrdiff_t>(b.offset),
                                              payload.begin() +
                                                  static_cast<std::ptrdiff_t>(b.offset + b.size))});
    }
    return archive;
}

WeightArchive archive_from_registry(const ParamRegistry& registry) {
    WeightArchive archive;
    for (const auto& e : registry.entries) {
        archive.add_tensor(e.name, e.tensor.shape(), e.tensor.values());
    }
    return archive;
}

void apply_archive_to_registry(const WeightArchive& archive, ParamRegistry& registry,
                               bool require_complete, const std::string& ignore_prefix) {
    for (const auto& t : archive.tensors) {
        if (!ignore_prefix.empty() && t.name.rfind(ignore_prefix, 0) == 0) continue;
        ParamRegistry::Entry* entry = nullptr;
        for (auto& e : registry.entries) {
            if (e.name == t.name) {
                entry = &e;
                break;
            }
        }
        if (entry == nullptr) {
            throw std::runtime_error("archive tensor '" + t.name + "' does not exist in the model");
        }
        if (entry->tensor.shape() != t.shape) {
            throw std::runtime_error("shape mismatch for tensor '" + t.name + "': archive " +
                                     shape_str(t.shape) + " vs model " +
                                     shape_str(entry->tensor.shape()));
        }
        entry->tensor.values() = t.data;
    }
    if (require_complete) {
        for (const auto& e : registry.entries) {
            if (archive.find_tensor(e.name) == nullptr) {
                throw std::runtime_error("archive is missing tensor '" + e.name + "'");
            }
        }
    }
}

}  // namespace transnetr
