#include "difflare/vq.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "difflare/checkpoint.hpp"
#include "difflare/errors.hpp"

namespace difflare {

using nlohmann::json;
namespace ag = difflare::ag;

ag::Tensor image_to_tensor(const ImageRGB& img) {
    std::vector<double> v(img.px.size());
    size_t plane = static_cast<size_t>(img.h) * img.w;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c)
                v[c * plane + static_cast<size_t>(y) * img.w + x] = img.at(y, x, c);
    return ag::constant({3, img.h, img.w}, std::move(v));
}

ImageRGB tensor_to_image(const ag::Tensor& t) {
    if (t->shape.size() != 3 || t->shape[0] != 3)
        throw DimensionError("tensor_to_image: want [3,H,W]");
    ImageRGB img(t->shape[1], t->shape[2]);
    size_t plane = static_cast<size_t>(img.h) * img.w;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = t->v[c * plane + static_cast<size_t>(y) * img.w + x];
    img.clip();
    return img;
}

VqModel::VqModel(const VqConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    if (cfg.codebook < 16) throw ConfigError("vq.codebook must be >= 16");
    int f = cfg.downsample;
    if (f < 1 || (f & (f - 1)) != 0) throw ConfigError("vq.downsample must be a power of two");
    levels_ = 0;
    while ((1 << levels_) < f) ++levels_;

    Rng rng(Rng::key(init_seed, "vq.init"));
    int w = cfg.width;
    enc_.emplace_back(ps_, "enc.in", 3, w, 3, 1, 1, rng);
    int cur = w;
    for (int l = 0; l < levels_; ++l) {
        int nxt = (l == levels_ - 1) ? 2 * w : w;
        enc_.emplace_back(ps_, "enc.down" + std::to_string(l), cur, nxt, 4, 2, 1, rng);
        cur = nxt;
    }
    enc_.emplace_back(ps_, "enc.mid", cur, cur, 3, 1, 1, rng);   // encoder tap
    enc_.emplace_back(ps_, "enc.proj", cur, cfg.embed_dim, 3, 1, 1, rng);

    dec_.emplace_back(ps_, "dec.in", cfg.embed_dim, cur, 3, 1, 1, rng);
    dec_.emplace_back(ps_, "dec.mid", cur, cur, 3, 1, 1, rng);   // decoder tap
    for (int l = 0; l < levels_; ++l) {
        int nxt = w;
        dec_.emplace_back(ps_, "dec.up" + std::to_string(l), cur, nxt, 3, 1, 1, rng);
        cur = nxt;
    }
    dec_.emplace_back(ps_, "dec.out", cur, 3, 3, 1, 1, rng);

    codebook_ = ps_.add("codebook", {cfg.codebook, cfg.embed_dim});
    nn::init_uniform(codebook_, 1.0, rng);
}

ag::Tensor VqModel::encode_raw(const ag::Tensor& x) const {
    if (x->shape.size() != 3 || x->shape[0] != 3)
        throw DimensionError("encode: want [3,H,W] input");
    int f = cfg_.downsample;
    if (x->shape[1] % f || x->shape[2] % f)
        throw DimensionError("encode: H and W must be divisible by downsample factor");
    ag::Tensor h = x;
    for (size_t i = 0; i + 1 < enc_.size(); ++i) h = ag::silu(enc_[i](h));
    return enc_.back()(h);
}

ag::Tensor VqModel::encoder_tap(const ImageRGB& img) const {
    ag::Tensor h = image_to_tensor(img);
    for (size_t i = 0; i + 1 < enc_.size(); ++i) h = ag::silu(enc_[i](h));
    return h;  // post enc.mid activation
}

std::vector<int> VqModel::nearest_codes(const ag::Tensor& z_e) const {
    int c = z_e->shape[0], hl = z_e->shape[1], wl = z_e->shape[2];
    int n = hl * wl, K = cfg_.codebook;
    std::vector<int> idx(n);
    size_t plane = static_cast<size_t>(hl) * wl;
    for (int p = 0; p < n; ++p) {
        double best = 1e300;
        int bi = 0;
        for (int k = 0; k < K; ++k) {
            double d = 0;
            for (int ci = 0; ci < c; ++ci) {
                double diff = z_e->v[ci * plane + p] - codebook_->v[static_cast<size_t>(k) * c + ci];
                d += diff * diff;
            }
            if (d < best) {
                best = d;
                bi = k;
            }
        }
        idx[p] = bi;
    }
    return idx;
}

ag::Tensor VqModel::decoder_trunk(const ag::Tensor& z, ag::Tensor* tap) const {
    ag::Tensor h = ag::silu(dec_[0](z));
    h = ag::silu(dec_[1](h));
    if (tap) *tap = h;
    for (int l = 0; l < levels_; ++l) h = ag::silu(dec_[2 + l](ag::upsample2x(h)));
    return ag::sigmoid(dec_.back()(h));
}

ag::Tensor VqModel::decode_train(const ag::Tensor& z) const { return decoder_trunk(z, nullptr); }

LatentTensor VqModel::encode(const ImageRGB& img) const {
    ag::Tensor z = encode_raw(image_to_tensor(img));
    LatentTensor out(z->shape[0], z->shape[1], z->shape[2]);
    double inv = 1.0 / latent_scale;
    for (size_t i = 0; i < z->v.size(); ++i) out.v[i] = z->v[i] * inv;
    return out;
}

ImageRGB VqModel::decode(const LatentTensor& z) const {
    if (z.c != cfg_.embed_dim) throw DimensionError("decode: latent channel mismatch");
    std::vector<double> raw(z.v.size());
    for (size_t i = 0; i < raw.size(); ++i) raw[i] = z.v[i] * latent_scale;
    ag::Tensor ze = ag::constant({z.c, z.h, z.w}, std::move(raw));
    auto idx = nearest_codes(ze);
    ag::Tensor zq = ag::nc_to_chw(ag::gather_rows(codebook_, idx), z.h, z.w);
    return tensor_to_image(decoder_trunk(zq, nullptr));
}

ag::Tensor VqModel::decoder_tap(const LatentTensor& z) const {
    std::vector<double> raw(z.v.size());
    for (size_t i = 0; i < raw.size(); ++i) raw[i] = z.v[i] * latent_scale;
    ag::Tensor ze = ag::constant({z.c, z.h, z.w}, std::move(raw));
    auto idx = nearest_codes(ze);
    ag::Tensor zq = ag::nc_to_chw(ag::gather_rows(codebook_, idx), z.h, z.w);
    ag::Tensor tap;
    decoder_trunk(zq, &tap);
    return tap;
}

void VqModel::save(const std::string& path, const std::string& extra_json) const {
    Checkpoint ck;
    ck.arrays = ps_.dump();
    json cfgj = {{"width", cfg_.width},       {"embed_dim", cfg_.embed_dim},
                 {"codebook", cfg_.codebook}, {"downsample", cfg_.downsample},
                 {"lr", cfg_.lr},             {"steps", cfg_.steps},
                 {"batch", cfg_.batch},       {"commit_beta", cfg_.commit_beta},
                 {"val_images", cfg_.val_images}, {"target_psnr", cfg_.target_psnr}};
    json extra = json::parse(extra_json);
    extra["latent_scale"] = latent_scale;
    ck.config_text = cfgj.dump();
    ck.extra_text = extra.dump();
    save_checkpoint(path, ck);
}

VqModel VqModel::load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    json cfgj = ck.config();
    VqConfig cfg;
    cfg.width = cfgj["width"];
    cfg.embed_dim = cfgj["embed_dim"];
    cfg.codebook = cfgj["codebook"];
    cfg.downsample = cfgj["downsample"];
    cfg.lr = cfgj["lr"];
    cfg.steps = cfgj["steps"];
    cfg.batch = cfgj["batch"];
    cfg.commit_beta = cfgj["commit_beta"];
    cfg.val_images = cfgj["val_images"];
    cfg.target_psnr = cfgj["target_psnr"];
    VqModel m(cfg, 0);
    m.ps_.load(ck.arrays);
    m.latent_scale = ck.extra()["latent_scale"];
    return m;
}

double codebook_usage(const VqModel& model, const std::vector<ImageRGB>& images) {
    std::vector<char> used(model.cfg().codebook, 0);
    for (const auto& img : images) {
        ag::Tensor ze = model.encode_raw(image_to_tensor(img));
        for (int k : model.nearest_codes(ze)) used[k] = 1;
    }
    int n = 0;
    for (char u : used) n += u;
    return static_cast<double>(n) / model.cfg().codebook;
}

TrainStats pretrain_vq(VqModel& model, const DatasetStream& train, const DatasetStream& val,
                       uint64_t seed, std::ostream* log) {
    const VqConfig& cfg = model.cfg();
    // clean pretraining corpus: flare-free GT composites
    std::vector<ag::Tensor> xs;
    for (int i = 0; i < train.size(); ++i) xs.push_back(image_to_tensor(train.sample(i).gt));
    std::vector<ag::Tensor> vxs;
    for (int i = 0; i < std::min(cfg.val_images, val.size()); ++i)
        vxs.push_back(image_to_tensor(val.sample(i).gt));
    if (xs.empty() || vxs.empty()) throw CorpusError("pretrain_vq: empty corpus");

    model.params().set_requires_grad();
    nn::Adam opt(model.params(), cfg.lr);

    auto val_loss = [&]() {
        double s = 0;
        for (auto& x : vxs) {
            ag::Tensor ze = model.encode_raw(x);
            auto idx = model.nearest_codes(ze);
            ag::Tensor zq = ag::nc_to_chw(ag::gather_rows(model.codebook_, idx), ze->shape[1],
                                          ze->shape[2]);
            ag::Tensor zst = ag::add(ze, ag::detach(ag::sub(zq, ze)));
            ag::Tensor rec = model.decode_train(zst);
            s += ag::mse_loss(rec, x)->v[0];
        }
        return s / static_cast<double>(vxs.size());
    };

    TrainStats stats;
    stats.initial = val_loss();
    double ema = stats.initial;

    const int data_init_step = 10;
    const int revive_every = 100;
    std::vector<int> usage(cfg.codebook, 0);

    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(Rng::key(seed, "vq.step", step));
        opt.zero_grad();
        ag::Tensor total;
        // deterministic ordered accumulation over the batch
        std::vector<std::vector<double>> batch_ze;
        for (int b = 0; b < cfg.batch; ++b) {
            const ag::Tensor& x = xs[rng.uniform_int(static_cast<int>(xs.size()))];
            ag::Tensor ze = model.encode_raw(x);
            auto idx = model.nearest_codes(ze);
            for (int k : idx) ++usage[k];
            batch_ze.push_back(ze->v);
            ag::Tensor zq =
                ag::nc_to_chw(ag::gather_rows(model.codebook_, idx), ze->shape[1], ze->shape[2]);
            ag::Tensor zst = ag::add(ze, ag::detach(ag::sub(zq, ze)));
            ag::Tensor rec = model.decode_train(zst);
            ag::Tensor loss = ag::add(
                ag::mse_loss(rec, x),
                ag::add(ag::mse_loss(zq, ag::detach(ze)),
                        ag::scale(ag::mse_loss(ze, ag::detach(zq)), cfg.commit_beta)));
            total = total ? ag::add(total, loss) : loss;
        }
        total = ag::scale(total, 1.0 / cfg.batch);
        if (!std::isfinite(total->v[0]))
            throw TrainingError("pretrain_vq: loss diverged (NaN) at step " +
                                std::to_string(step));
        ag::backward(total);
        opt.step();
        ema = 0.98 * ema + 0.02 * total->v[0];

        // data-dependent codebook init and dead-entry revival keep usage up
        if (step == data_init_step || (step > data_init_step && step % revive_every == 0)) {
            int c = cfg.embed_dim;
            int positions = static_cast<int>(batch_ze[0].size()) / c;
            size_t plane = static_cast<size_t>(positions);
            for (int k = 0; k < cfg.codebook; ++k) {
                bool dead = (step == data_init_step) || usage[k] == 0;
                if (!dead) continue;
                int bi = rng.uniform_int(static_cast<int>(batch_ze.size()));
                int p = rng.uniform_int(positions);
                for (int ci = 0; ci < c; ++ci)
                    model.codebook_->v[static_cast<size_t>(k) * c + ci] =
                        batch_ze[bi][ci * plane + p];
            }
            std::fill(usage.begin(), usage.end(), 0);
        }
        if (log && step % 50 == 0)
            (*log) << "vq step " << step << " loss " << total->v[0] << " ema " << ema << "\n";
    }

    stats.final_loss = val_loss();
    if (!(stats.final_loss < 0.5 * stats.initial))
        throw TrainingError("pretrain_vq: reconstruction loss did not halve (initial " +
                            std::to_string(stats.initial) + ", final " +
                            std::to_string(stats.final_loss) + ")");

    // latent scale: std of z_e over the training corpus
    double sum = 0, sum2 = 0;
    size_t n = 0;
    for (auto& x : xs) {
        ag::Tensor ze = model.encode_raw(x);
        for (double v : ze->v) {
            sum += v;
            sum2 += v * v;
            ++n;
        }
    }
    double mean = sum / n;
    model.latent_scale = std::sqrt(std::max(1e-12, sum2 / n - mean * mean));
    model.params().freeze_all();
    return stats;
}

}  // namespace difflare
