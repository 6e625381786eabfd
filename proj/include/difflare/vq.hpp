#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "difflare/image.hpp"
#include "difflare/nn.hpp"
#include "difflare/synthesis.hpp"

namespace difflare {

// c x h_l x w_l latent; the domain of diffusion.
struct LatentTensor {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;

    LatentTensor() = default;
    LatentTensor(int c, int h, int w) : c(c), h(h), w(w), v(static_cast<size_t>(c) * h * w, 0.0) {}
    size_t numel() const { return v.size(); }
};

struct VqConfig {
    int width = 64;
    int embed_dim = 4;     // latent channels c
    int codebook = 256;    // K
    int downsample = 4;    // f, power of two
    double lr = 2e-3;
    int steps = 600;
    int batch = 4;
    double commit_beta = 0.25;
    int val_images = 8;
    double target_psnr = 25.0;  // roundtrip acceptance floor for this config
};

struct TrainStats {
    double initial = 0.0;
    double final_loss = 0.0;
};

// Toy VQ autoencoder. Diffusion runs on the continuous pre-quantization
// latent scaled to unit variance; the quantizer sits on the decode path only.
class VqModel {
  public:
    VqModel(const VqConfig& cfg, uint64_t init_seed);

    // public inference surface; deterministic given loaded weights
    LatentTensor encode(const ImageRGB& img) const;   // scaled continuous latent
    ImageRGB decode(const LatentTensor& z) const;     // unscale -> quantize -> decoder

    // feature taps for AFFM, both at latent resolution (no grad)
    ag::Tensor encoder_tap(const ImageRGB& img) const;
    ag::Tensor decoder_tap(const LatentTensor& z) const;
    int tap_channels() const { return 2 * cfg_.width; }

    // autograd paths used by training
    ag::Tensor encode_raw(const ag::Tensor& x) const;   // unscaled z_e [c,hl,wl]
    ag::Tensor decode_train(const ag::Tensor& z) const; // decoder on straight-through latent
    std::vector<int> nearest_codes(const ag::Tensor& z_e) const;

    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    const VqConfig& cfg() const { return cfg_; }

    double latent_scale = 1.0;  // std of z_e on the pretraining corpus

    void save(const std::string& path, const std::string& extra_json = "{}") const;
    static VqModel load(const std::string& path);

  private:
    VqConfig cfg_;
    nn::ParamStore ps_;
    std::vector<nn::Conv2d> enc_;   // ends with the c-channel projection
    std::vector<nn::Conv2d> dec_;   // starts at latent res, sigmoid head
    ag::Tensor codebook_;           // [K, c]
    int levels_ = 0;                // log2(f)

    ag::Tensor decoder_trunk(const ag::Tensor& z, ag::Tensor* tap) const;
    friend TrainStats pretrain_vq(VqModel&, const DatasetStream&, const DatasetStream&,
                                  uint64_t, std::ostream*);
};

ag::Tensor image_to_tensor(const ImageRGB& img);
ImageRGB tensor_to_image(const ag::Tensor& t);

// Trains in place on clean (GT) images. Postconditions: reconstruction loss
// halves from the first evaluation, codebook usage >= 25% on validation.
TrainStats pretrain_vq(VqModel& model, const DatasetStream& train, const DatasetStream& val,
                       uint64_t seed, std::ostream* log = nullptr);

// fraction of codebook entries used while encoding the given images
double codebook_usage(const VqModel& model, const std::vector<ImageRGB>& images);

}  // namespace difflare
