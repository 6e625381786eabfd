#pragma once

#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "difflare/affm.hpp"
#include "difflare/config.hpp"

namespace difflare {

// fnv1a64 over file bytes, hex
std::string file_hash(const std::string& path);

struct VariantResult {
    std::string variant;
    double psnr_db = 0.0, ssim = 0.0;
    double flare_free_mae = 0.0;  // mean abs error vs GT on flare-free pixels
};

struct EvalRow {
    int index = 0;
    std::vector<VariantResult> variants;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::vector<VariantResult> means;  // same variant order as rows
    double wall_seconds = 0.0;
    std::string to_json() const;
};

// Loaded model bundle for inference / evaluation.
struct ModelBundle {
    std::unique_ptr<VqModel> vq;
    std::unique_ptr<DenoiserModel> denoiser;
    std::unique_ptr<SgimModel> sgim;
    std::unique_ptr<AffmModel> affm, affm_unguided;
    NoiseSchedule ns;
};

// Staged-training orchestrator over an artifact directory:
//   corpus/  vq.ckpt  diffusion.ckpt  sgim.ckpt  affm.ckpt  affm_unguided.ckpt
//   manifest.json  config.<stage>.json
class Pipeline {
  public:
    Pipeline(const RunConfig& cfg);

    // stage in {synth, train-vq, train-diffusion, train-sgim, train-affm}
    void run_stage(const std::string& stage, std::ostream* log = nullptr);

    ModelBundle load_models() const;  // DependencyError if a checkpoint is missing

    ImageRGB restore(const ModelBundle& b, const ImageRGB& x_in, double guidance_scale,
                     uint64_t seed) const;
    void infer_file(const std::string& in_png, const std::string& out_png,
                    std::ostream* log = nullptr) const;

    EvalReport evaluate(std::ostream* log = nullptr) const;
    void write_eval_artifacts(const EvalReport& r) const;  // report json + panels

    // manifest DAG check: every completed stage's recorded input hashes still
    // match the current artifact bytes
    bool manifest_valid(std::string* why = nullptr) const;

    const RunConfig& cfg() const { return cfg_; }
    std::string artifact(const std::string& name) const;

  private:
    RunConfig cfg_;
    void require(const std::string& artifact_name, const std::string& producer_stage) const;
    void record_stage(const std::string& stage, const std::vector<std::string>& inputs,
                      const std::vector<std::string>& outputs, double wall_seconds) const;
};

}  // namespace difflare
