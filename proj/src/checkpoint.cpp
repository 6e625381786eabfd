#include "difflare/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "difflare/errors.hpp"
#include "difflare/rng.hpp"

namespace difflare {

using nlohmann::json;

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

nlohmann::json Checkpoint::config() {
    return config_text.empty() ? json::object() : json::parse(config_text);
}
nlohmann::json Checkpoint::extra() {
    return extra_text.empty() ? json::object() : json::parse(extra_text);
}

std::string Checkpoint::hash_arrays(
    const std::map<std::string, std::pair<std::vector<int>, std::vector<double>>>& arrays) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, arr] : arrays) {  // std::map iterates name-sorted
        h = fnv1a64(name, h);
        h = fnv1a64(arr.second.data(), arr.second.size() * sizeof(double), h);
    }
    return hash_hex(h);
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    json header;
    header["arrays"] = json::array();
    uint64_t offset = 0;
    for (const auto& [name, arr] : ck.arrays) {
        json a;
        a["name"] = name;
        a["shape"] = arr.first;
        a["offset"] = offset;
        a["count"] = arr.second.size();
        header["arrays"].push_back(a);
        offset += arr.second.size() * sizeof(double);
    }
    header["config"] = ck.config_text.empty() ? json::object() : json::parse(ck.config_text);
    header["extra"] = ck.extra_text.empty() ? json::object() : json::parse(ck.extra_text);
    header["weight_hash"] = Checkpoint::hash_arrays(ck.arrays);
    std::string htext = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint: " + path);
    f.write("DFLRCKPT", 8);
    uint32_t version = 1;
    f.write(reinterpret_cast<const char*>(&version), 4);
    uint64_t hlen = htext.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& [name, arr] : ck.arrays)
        f.write(reinterpret_cast<const char*>(arr.second.data()),
                static_cast<std::streamsize>(arr.second.size() * sizeof(double)));
    if (!f) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "DFLRCKPT", 8) != 0)
        throw IoError("bad checkpoint magic: " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    if (version != 1) throw IoError("unsupported checkpoint version");
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string htext(hlen, '\0');
    f.read(htext.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(htext);

    Checkpoint ck;
    ck.config_text = header["config"].dump();
    ck.extra_text = header["extra"].dump();
    for (const auto& a : header["arrays"]) {
        std::string name = a["name"];
        std::vector<int> shape = a["shape"].get<std::vector<int>>();
        size_t count = a["count"];
        std::vector<double> data(count);
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(count * sizeof(double)));
        ck.arrays[name] = {std::move(shape), std::move(data)};
    }
    if (!f) throw IoError("truncated checkpoint: " + path);
    ck.weight_hash = Checkpoint::hash_arrays(ck.arrays);
    std::string declared = header["weight_hash"];
    if (declared != ck.weight_hash)
        throw IntegrityError("checkpoint weight hash mismatch: " + path);
    return ck;
}

}  // namespace difflare
