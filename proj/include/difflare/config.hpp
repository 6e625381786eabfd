#pragma once

#include <string>
#include <vector>

#include "difflare/affm.hpp"
#include "difflare/diffusion.hpp"
#include "difflare/sgim.hpp"
#include "difflare/synthesis.hpp"
#include "difflare/vq.hpp"

namespace difflare {

struct InferConfig {
    double guidance_scale = 0.0;
    int token = 0;
};

struct EvalConfig {
    std::vector<std::string> variants{"input", "no-affm", "unguided-affm", "full"};
    int images = 32;
    double guidance_scale = 0.0;
    bool panels = true;
};

// One document with per-stage sections; unknown keys are rejected
// recursively and every run persists its resolved copy.
struct RunConfig {
    uint64_t seed = 0;
    std::string out_dir = "out";
    CorpusConfig corpus;
    VqConfig vq;
    DiffusionConfig diffusion;
    SgimConfig sgim;
    FusionConfig affm;
    InferConfig infer;
    EvalConfig eval;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);  // empty path -> defaults
std::string dump_run_config(const RunConfig& cfg);   // resolved, all keys explicit

}  // namespace difflare
