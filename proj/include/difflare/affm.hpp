#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "difflare/diffusion.hpp"
#include "difflare/lgp.hpp"
#include "difflare/sgim.hpp"
#include "difflare/synthesis.hpp"
#include "difflare/vq.hpp"

namespace difflare {

struct FusionConfig {
    int m = 2;             // conv layers
    int n = 2;             // RRDB blocks
    int attention_heads = 1;
    int width = 64;
    bool lgp_guided = true;       // use LM' in attention + fidelity term
    bool additive_mask = false;   // -inf style masking instead of multiplicative
    double lambda_fidelity = 1.0;
    double lgp_threshold = 0.85;
    double lr = 1e-3;
    int steps = 500;
    int batch = 4;
    int cache_samples = 48;
    double sample_guidance = 0.0;  // CFG scale used when caching restored latents
    double noflare_prob = 0.1;     // degenerate-sample fraction in the training mix
};

// Eq. 4/5: project q,k,v, scale scores by 1/sqrt(width), multiply by LM'
// (identical rows, passed as the shared row; empty = unmasked), softmax, times V.
// additive=true switches to -1e9 masking of near-zero mask entries.
ag::Tensor masked_attention(const ag::Tensor& q, const ag::Tensor& k, const ag::Tensor& v,
                            const std::vector<double>& lm_row, const ag::Tensor& wq,
                            const ag::Tensor& wk, const ag::Tensor& wv,
                            bool additive = false);

namespace detail {

// two dense 3-conv blocks with nested residuals (toy RRDB)
struct Rdb {
    nn::Conv2d c1, c2, c3;
    Rdb() = default;
    Rdb(nn::ParamStore& ps, const std::string& name, int width, int growth, Rng& rng);
    ag::Tensor forward(const ag::Tensor& x) const;
};

struct Rrdb {
    Rdb r1, r2;
    Rrdb() = default;
    Rrdb(nn::ParamStore& ps, const std::string& name, int width, int growth, Rng& rng);
    ag::Tensor forward(const ag::Tensor& x) const;
};

}  // namespace detail

// Fuses VQ-encoder features of the input with VQ-decoder features of the
// restored latent inside a small U-Net over x_in (stride-2 pyramid down to
// latent resolution, skip connections on the way up); residual head on top of
// x_in, zero-initialized so the fusion starts as the identity on the input.
class AffmModel {
  public:
    AffmModel(const FusionConfig& cfg, int tap_channels, int latent_size, int image_size,
              uint64_t init_seed);

    ag::Tensor forward(const ag::Tensor& enc_feat, const ag::Tensor& dec_feat,
                       const ag::Tensor& x_in, const AttentionMask* lm) const;
    ImageRGB fuse(const ag::Tensor& enc_feat, const ag::Tensor& dec_feat, const ImageRGB& x_in,
                  const AttentionMask* lm) const;

    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    const FusionConfig& cfg() const { return cfg_; }

    void save(const std::string& path, const std::string& extra_json = "{}") const;
    static AffmModel load(const std::string& path);

  private:
    FusionConfig cfg_;
    int tap_channels_ = 0, latent_size_ = 0, image_size_ = 0, up_levels_ = 0;
    nn::ParamStore ps_;
    std::vector<nn::Conv2d> xenc_;  // full-res pyramid over x_in, one level per stride
    nn::Conv2d conv_in_;
    std::vector<nn::Conv2d> convs_;
    std::vector<detail::Rrdb> rrdbs_;
    ag::Tensor wq_, wk_, wv_;
    std::vector<nn::Conv2d> head_;
    nn::Conv2d fuse_;
    nn::Conv2d head_out_;
};

// Precomputed record for AFFM training / evaluation
struct RestorationRecord {
    ImageRGB x_in, gt;
    ImageRGB reflective, scattering;  // for flare-free region accounting
    ag::Tensor enc_tap, dec_tap;
    LatentTensor z_restored;
    AttentionMask lm;
    LuminanceMask pixel_mask;
};

RestorationRecord make_record(const FlareSample& s, const VqModel& vq,
                              const DenoiserModel& denoiser, const SgimModel& sgim,
                              const NoiseSchedule& ns, double guidance_scale,
                              double lgp_threshold, uint64_t seed);

// Trains the guided and the LGP-ablated models on a shared cache; all
// upstream weights hash-verified before and after.
TrainStats train_affm(AffmModel& guided, AffmModel& unguided, const VqModel& vq,
                      const DenoiserModel& denoiser, const SgimModel& sgim,
                      const DatasetStream& train, const DatasetStream& val,
                      const FusionConfig& cfg, uint64_t seed, std::ostream* log = nullptr);

}  // namespace difflare
