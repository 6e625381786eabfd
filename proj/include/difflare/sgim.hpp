#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "difflare/diffusion.hpp"
#include "difflare/synthesis.hpp"
#include "difflare/vq.hpp"

namespace difflare {

struct SgimConfig {
    double lr = 1e-3;
    int steps = 500;
    int batch = 8;
};

// Multi-scale features of the input latent, level i at the denoiser's
// level-i resolution.
struct GuidancePyramid {
    std::vector<ag::Tensor> feats;
};

// Side encoder over z_in plus zero-initialized SPADE modulation convs
// injected into the frozen denoiser at each resolution level.
class SgimModel {
  public:
    SgimModel(const DiffusionConfig& denoiser_cfg, uint64_t init_seed);

    GuidancePyramid extract_guidance(const LatentTensor& z_in) const;
    GuidancePyramid extract_guidance_t(const ag::Tensor& z_in) const;
    SpadeHooks hooks(const GuidancePyramid& p) const;

    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    int levels() const { return static_cast<int>(enc_.size()); }

    void save(const std::string& path, const std::string& extra_json = "{}") const;
    static SgimModel load(const std::string& path);

  private:
    DiffusionConfig dcfg_;
    nn::ParamStore ps_;
    std::vector<nn::Conv2d> enc_, enc_b_;    // E_SGIM, two convs per level
    std::vector<nn::Conv2d> gamma_, beta_;   // SPADE convs per level, zero-init
    nn::Conv2d z0_head_, gate_head_;         // guided prediction head, gate zero-init
};

// Trains E_SGIM + SPADE convs only; denoiser and VQ stay frozen and are
// hash-verified before and after. Conditioning is the null prompt.
TrainStats train_sgim(SgimModel& sgim, const DenoiserModel& denoiser, const VqModel& vq,
                      const DatasetStream& train, const DatasetStream& val,
                      const SgimConfig& cfg, uint64_t seed, std::ostream* log = nullptr);

}  // namespace difflare
