#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace difflare {

// Self-describing weight container:
//   bytes 0-7   magic "DFLRCKPT"
//   bytes 8-11  u32 version (1), little-endian
//   bytes 12-19 u64 header length H
//   bytes 20..  H bytes of JSON header
//   then        raw float64 little-endian array data, in header order
// Header: {"arrays":[{"name","shape","offset","count"}...] (name-sorted),
//          "config": <stage config echo>, "extra": <free-form>,
//          "weight_hash": "<fnv1a64 hex over array bytes in header order>"}
struct Checkpoint {
    std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> arrays;
    nlohmann::json config();          // parsed config echo
    nlohmann::json extra();
    std::string config_text;          // serialized JSON
    std::string extra_text;
    std::string weight_hash;          // hex

    static std::string hash_arrays(
        const std::map<std::string, std::pair<std::vector<int>, std::vector<double>>>& arrays);
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

std::string hash_hex(uint64_t h);

}  // namespace difflare
