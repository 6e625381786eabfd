#include "difflare/affm.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "difflare/checkpoint.hpp"
#include "difflare/errors.hpp"

namespace difflare {

using nlohmann::json;
namespace ag = difflare::ag;

ag::Tensor masked_attention(const ag::Tensor& q, const ag::Tensor& k, const ag::Tensor& v,
                            const std::vector<double>& lm_row, const ag::Tensor& wq,
                            const ag::Tensor& wk, const ag::Tensor& wv, bool additive) {
    if (q->shape.size() != 2 || k->shape != q->shape || v->shape != q->shape)
        throw DimensionError("masked_attention: q,k,v must share shape [n, width]");
    int n = q->shape[0], width = q->shape[1];
    if (!lm_row.empty() && static_cast<int>(lm_row.size()) != n)
        throw DimensionError("masked_attention: mask length mismatch");
    ag::Tensor Q = ag::matmul(q, wq), K = ag::matmul(k, wk), V = ag::matmul(v, wv);
    ag::Tensor scores = ag::scale(ag::matmul(Q, ag::transpose(K)), 1.0 / std::sqrt(width));
    if (!lm_row.empty()) {
        std::vector<double> full(static_cast<size_t>(n) * n);
        if (additive) {
            // shift masked-out keys far negative instead of scaling
            std::vector<double> shift(static_cast<size_t>(n) * n, 0.0);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    if (lm_row[j] < 1e-6) shift[static_cast<size_t>(i) * n + j] = -1e9;
            scores = ag::add(scores, ag::constant({n, n}, std::move(shift)));
        } else {
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) full[static_cast<size_t>(i) * n + j] = lm_row[j];
            scores = ag::mul_mask(scores, full);
        }
    }
    return ag::matmul(ag::softmax_rows(scores), V);
}

namespace detail {

Rdb::Rdb(nn::ParamStore& ps, const std::string& name, int width, int growth, Rng& rng)
    : c1(ps, name + ".c1", width, growth, 3, 1, 1, rng),
      c2(ps, name + ".c2", width + growth, growth, 3, 1, 1, rng),
      c3(ps, name + ".c3", width + 2 * growth, width, 3, 1, 1, rng) {}

ag::Tensor Rdb::forward(const ag::Tensor& x) const {
    ag::Tensor x1 = ag::leaky_relu(c1(x));
    ag::Tensor x2 = ag::leaky_relu(c2(ag::concat_ch(x, x1)));
    ag::Tensor x3 = c3(ag::concat_ch(ag::concat_ch(x, x1), x2));
    return ag::add(x, ag::scale(x3, 0.2));
}

Rrdb::Rrdb(nn::ParamStore& ps, const std::string& name, int width, int growth, Rng& rng)
    : r1(ps, name + ".r1", width, growth, rng), r2(ps, name + ".r2", width, growth, rng) {}

ag::Tensor Rrdb::forward(const ag::Tensor& x) const {
    ag::Tensor y = r2.forward(r1.forward(x));
    return ag::add(x, ag::scale(ag::sub(y, x), 0.2));
}

}  // namespace detail

AffmModel::AffmModel(const FusionConfig& cfg, int tap_channels, int latent_size, int image_size,
                     uint64_t init_seed)
    : cfg_(cfg), tap_channels_(tap_channels), latent_size_(latent_size),
      image_size_(image_size) {
    if (cfg.m < 1 || cfg.n < 1) throw ConfigError("affm: m and n must be >= 1");
    if (cfg.attention_heads != 1) throw ConfigError("affm: only 1 attention head supported");
    if (image_size % latent_size) throw ConfigError("affm: image size not multiple of latent");
    int f = image_size / latent_size;
    if (f & (f - 1)) throw ConfigError("affm: upsample factor must be a power of two");
    up_levels_ = 0;
    while ((1 << up_levels_) < f) ++up_levels_;

    // init keyed per layer name so the guided / mask-ablated pair starts from
    // identical weights on every shared layer (paired ablation comparison)
    auto layer_rng = [&](const std::string& name) {
        return Rng(Rng::key(init_seed, "affm.init." + name));
    };
    int w = cfg.width;
    int xw = std::max(8, w / 2);
    // pyramid over x_in: level 0 at full res, then stride-2 down to latent res;
    // the guided variant also sees the pixel-level flare-free indicator
    {
        Rng r = layer_rng("xenc0");
        xenc_.emplace_back(ps_, "xenc0", cfg.lgp_guided ? 4 : 3, xw, 3, 1, 1, r);
    }
    for (int i = 1; i <= up_levels_; ++i) {
        std::string n = "xenc" + std::to_string(i);
        Rng r = layer_rng(n);
        xenc_.emplace_back(ps_, n, xw, xw, 3, 2, 1, r);
    }
    {
        Rng r = layer_rng("conv_in");
        conv_in_ = nn::Conv2d(ps_, "conv_in", 2 * tap_channels + xw, w, 3, 1, 1, r);
    }
    for (int i = 0; i < cfg.m; ++i) {
        std::string n = "conv" + std::to_string(i);
        Rng r = layer_rng(n);
        convs_.emplace_back(ps_, n, w, w, 3, 1, 1, r);
    }
    int growth = std::max(8, w / 2);
    for (int i = 0; i < cfg.n; ++i) {
        std::string n = "rrdb" + std::to_string(i);
        Rng r = layer_rng(n);
        rrdbs_.emplace_back(ps_, n, w, growth, r);
    }
    wq_ = ps_.add("attn.wq", {w, w});
    wk_ = ps_.add("attn.wk", {w, w});
    wv_ = ps_.add("attn.wv", {w, w});
    {
        Rng r = layer_rng("attn");
        nn::kaiming_init(wq_, w, r);
        nn::kaiming_init(wk_, w, r);
        nn::kaiming_init(wv_, w, r);
    }
    for (int i = 0; i < up_levels_; ++i) {
        std::string n = "head" + std::to_string(i);
        Rng r = layer_rng(n);
        head_.emplace_back(ps_, n, w + xw, w, 3, 1, 1, r);
    }
    // full-resolution branch: the upsampled features only localize flares
    // coarsely, so the head also sees x_in directly
    {
        Rng r = layer_rng("fuse");
        fuse_ = nn::Conv2d(ps_, "fuse", w + 3, w, 3, 1, 1, r);
    }
    // zero-init residual head: fusion starts as the identity on x_in
    {
        Rng r = layer_rng("head_out");
        head_out_ = nn::Conv2d(ps_, "head_out", w, 3, 3, 1, 1, r, /*zero_init=*/true);
    }
}

ag::Tensor AffmModel::forward(const ag::Tensor& enc_feat, const ag::Tensor& dec_feat,
                              const ag::Tensor& x_in, const AttentionMask* lm) const {
    if (enc_feat->shape != dec_feat->shape)
        throw DimensionError("affm: encoder/decoder tap shape mismatch");
    if (enc_feat->shape[0] != tap_channels_)
        throw DimensionError("affm: unexpected tap channel count");
    int hl = enc_feat->shape[1], wl = enc_feat->shape[2];
    // encoder pyramid over x_in; xs[i] has stride 2^i, xs.back() is latent-res
    std::vector<ag::Tensor> xs;
    ag::Tensor xf = x_in;
    if (cfg_.lgp_guided) {
        // Eq. 2 indicator as a constant fourth input channel (1 = flare-free)
        int hh = x_in->shape[1], ww = x_in->shape[2];
        size_t plane = static_cast<size_t>(hh) * ww;
        std::vector<double> m(plane);
        for (size_t i = 0; i < plane; ++i) {
            double yl = 0.299 * x_in->v[i] + 0.587 * x_in->v[plane + i] +
                        0.114 * x_in->v[2 * plane + i];
            m[i] = yl < cfg_.lgp_threshold ? 1.0 : 0.0;
        }
        xf = ag::concat_ch(x_in, ag::constant({1, hh, ww}, std::move(m)));
    }
    for (const auto& c : xenc_) {
        xf = ag::silu(c(xf));
        xs.push_back(xf);
    }
    ag::Tensor h = ag::silu(conv_in_(ag::concat_ch(ag::concat_ch(enc_feat, dec_feat), xs.back())));
    for (const auto& c : convs_) h = ag::silu(c(h));
    for (const auto& r : rrdbs_) h = r.forward(h);
    ag::Tensor tok = ag::chw_to_nc(h);
    static const std::vector<double> no_mask;
    const std::vector<double>& row = lm ? lm->row : no_mask;
    ag::Tensor att = masked_attention(tok, tok, tok, row, wq_, wk_, wv_, cfg_.additive_mask);
    h = ag::add(h, ag::nc_to_chw(att, hl, wl));
    for (int i = 0; i < up_levels_; ++i)
        h = ag::silu(head_[i](ag::concat_ch(ag::upsample2x(h), xs[up_levels_ - 1 - i])));
    h = ag::silu(fuse_(ag::concat_ch(h, x_in)));
    return ag::add(x_in, head_out_(h));
}

ImageRGB AffmModel::fuse(const ag::Tensor& enc_feat, const ag::Tensor& dec_feat,
                         const ImageRGB& x_in, const AttentionMask* lm) const {
    return tensor_to_image(forward(enc_feat, dec_feat, image_to_tensor(x_in), lm));
}

void AffmModel::save(const std::string& path, const std::string& extra_json) const {
    Checkpoint ck;
    ck.arrays = ps_.dump();
    json c = {{"m", cfg_.m},
              {"n", cfg_.n},
              {"attention_heads", cfg_.attention_heads},
              {"width", cfg_.width},
              {"lgp_guided", cfg_.lgp_guided},
              {"additive_mask", cfg_.additive_mask},
              {"lambda_fidelity", cfg_.lambda_fidelity},
              {"lgp_threshold", cfg_.lgp_threshold},
              {"tap_channels", tap_channels_},
              {"latent_size", latent_size_},
              {"image_size", image_size_}};
    ck.config_text = c.dump();
    ck.extra_text = extra_json;
    save_checkpoint(path, ck);
}

AffmModel AffmModel::load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    json c = ck.config();
    FusionConfig cfg;
    cfg.m = c["m"];
    cfg.n = c["n"];
    cfg.attention_heads = c["attention_heads"];
    cfg.width = c["width"];
    cfg.lgp_guided = c["lgp_guided"];
    cfg.additive_mask = c["additive_mask"];
    cfg.lambda_fidelity = c["lambda_fidelity"];
    cfg.lgp_threshold = c["lgp_threshold"];
    AffmModel m(cfg, c["tap_channels"], c["latent_size"], c["image_size"], 0);
    m.ps_.load(ck.arrays);
    return m;
}

RestorationRecord make_record(const FlareSample& s, const VqModel& vq,
                              const DenoiserModel& denoiser, const SgimModel& sgim,
                              const NoiseSchedule& ns, double guidance_scale,
                              double lgp_threshold, uint64_t seed) {
    RestorationRecord r;
    r.x_in = s.input;
    r.gt = s.gt;
    r.reflective = s.reflective;
    r.scattering = s.scattering;
    LatentTensor z_in = vq.encode(s.input);
    SpadeHooks hooks = sgim.hooks(sgim.extract_guidance(z_in));
    r.z_restored = sample(denoiser, ns, &hooks, Condition::of(0), guidance_scale, seed);
    r.enc_tap = vq.encoder_tap(s.input);
    r.dec_tap = vq.decoder_tap(r.z_restored);
    r.pixel_mask = luminance_mask(s.input, lgp_threshold);
    r.lm = to_attention_mask(r.pixel_mask, z_in.h, z_in.w);
    return r;
}

namespace {

// per-channel replication of the flare-free indicator, CHW layout
std::vector<double> mask_weights(const LuminanceMask& lm) {
    size_t plane = lm.mask.size();
    std::vector<double> w(3 * plane);
    for (int c = 0; c < 3; ++c)
        for (size_t i = 0; i < plane; ++i) w[c * plane + i] = lm.mask[i];
    return w;
}

std::vector<double> flip_chw(const std::vector<double>& v, int c, int h, int w, bool fh,
                             bool fv) {
    std::vector<double> o(v.size());
    size_t plane = static_cast<size_t>(h) * w;
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                int sy = fv ? h - 1 - y : y, sx = fh ? w - 1 - x : x;
                o[ci * plane + static_cast<size_t>(y) * w + x] =
                    v[ci * plane + static_cast<size_t>(sy) * w + sx];
            }
    return o;
}

ag::Tensor flip_tensor(const ag::Tensor& t, bool fh, bool fv) {
    return ag::constant({t->shape[0], t->shape[1], t->shape[2]},
                        flip_chw(t->v, t->shape[0], t->shape[1], t->shape[2], fh, fv));
}

// flipped view of a cached record; the caches are small, so the dihedral
// flips are a cheap way to multiply them by four
struct AugRecord {
    ag::Tensor x_in, gt, enc, dec;
    AttentionMask lm;
    std::vector<double> weights;
};

AugRecord augment(const RestorationRecord& r, bool fh, bool fv) {
    AugRecord a;
    a.x_in = flip_tensor(image_to_tensor(r.x_in), fh, fv);
    a.gt = flip_tensor(image_to_tensor(r.gt), fh, fv);
    a.enc = flip_tensor(r.enc_tap, fh, fv);
    a.dec = flip_tensor(r.dec_tap, fh, fv);
    a.lm = r.lm;
    a.lm.pooled = flip_chw(r.lm.pooled, 1, r.lm.h_l, r.lm.w_l, fh, fv);
    a.lm.row = flip_chw(r.lm.row, 1, r.lm.h_l, r.lm.w_l, fh, fv);
    LuminanceMask pm = r.pixel_mask;
    for (int y = 0; y < pm.h; ++y)
        for (int x = 0; x < pm.w; ++x) {
            int sy = fv ? pm.h - 1 - y : y, sx = fh ? pm.w - 1 - x : x;
            pm.mask[static_cast<size_t>(y) * pm.w + x] = r.pixel_mask.at(sy, sx);
        }
    a.weights = mask_weights(pm);
    return a;
}

}  // namespace

TrainStats train_affm(AffmModel& guided, AffmModel& unguided, const VqModel& vq,
                      const DenoiserModel& denoiser, const SgimModel& sgim,
                      const DatasetStream& train, const DatasetStream& val,
                      const FusionConfig& cfg, uint64_t seed, std::ostream* log) {
    uint64_t vq_hash = vq.params().content_hash();
    uint64_t den_hash = denoiser.params().content_hash();
    uint64_t sgim_hash = sgim.params().content_hash();

    const DiffusionConfig& dcfg = denoiser.cfg();
    NoiseSchedule ns = build_schedule(dcfg.T, dcfg.beta_start, dcfg.beta_end, dcfg.schedule);

    int ntrain = std::min(cfg.cache_samples, train.size());
    int nval = std::min(8, val.size());
    if (ntrain == 0 || nval == 0) throw CorpusError("train_affm: empty stream");

    std::vector<RestorationRecord> cache, vcache;
    for (int i = 0; i < ntrain; ++i) {
        cache.push_back(make_record(train.sample(i), vq, denoiser, sgim, ns,
                                    cfg.sample_guidance, cfg.lgp_threshold,
                                    Rng::key(seed, "affm.cache", i)));
        if (log && i % 8 == 0) (*log) << "affm cache " << i << "/" << ntrain << "\n";
    }
    for (int i = 0; i < nval; ++i)
        vcache.push_back(make_record(val.sample(i), vq, denoiser, sgim, ns,
                                     cfg.sample_guidance, cfg.lgp_threshold,
                                     Rng::key(seed, "affm.valcache", i)));

    std::vector<std::vector<AugRecord>> augs(cache.size());
    for (size_t i = 0; i < cache.size(); ++i)
        for (int f = 0; f < 4; ++f) augs[i].push_back(augment(cache[i], f & 1, f & 2));

    auto val_loss = [&](const AffmModel& m, bool use_mask) {
        double s = 0;
        for (auto& r : vcache) {
            ag::Tensor out = m.forward(r.enc_tap, r.dec_tap, image_to_tensor(r.x_in),
                                       use_mask ? &r.lm : nullptr);
            s += ag::l1_loss(out, image_to_tensor(r.gt))->v[0];
        }
        return s / static_cast<double>(vcache.size());
    };

    guided.params().set_requires_grad();
    unguided.params().set_requires_grad();
    nn::Adam opt_g(guided.params(), cfg.lr);
    nn::Adam opt_u(unguided.params(), cfg.lr);

    TrainStats stats;
    stats.initial = val_loss(guided, true);

    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(Rng::key(seed, "affm.step", step));
        std::vector<std::pair<int, int>> idx(cfg.batch);
        for (auto& i : idx)
            i = {rng.uniform_int(static_cast<int>(cache.size())), rng.uniform_int(4)};

        opt_g.zero_grad();
        ag::Tensor total_g;
        for (auto [i, f] : idx) {
            const AugRecord& r = augs[i][f];
            ag::Tensor out = guided.forward(r.enc, r.dec, r.x_in, &r.lm);
            ag::Tensor loss = ag::l1_loss(out, r.gt);
            if (cfg.lambda_fidelity > 0.0)
                loss = ag::add(loss, ag::scale(ag::weighted_l1_loss(out, r.x_in, r.weights),
                                               cfg.lambda_fidelity));
            total_g = total_g ? ag::add(total_g, loss) : loss;
        }
        total_g = ag::scale(total_g, 1.0 / cfg.batch);
        if (!std::isfinite(total_g->v[0]))
            throw TrainingError("train_affm: guided loss diverged at step " +
                                std::to_string(step));
        ag::backward(total_g);
        opt_g.step();

        opt_u.zero_grad();
        ag::Tensor total_u;
        for (auto [i, f] : idx) {
            const AugRecord& r = augs[i][f];
            ag::Tensor out = unguided.forward(r.enc, r.dec, r.x_in, nullptr);
            ag::Tensor loss = ag::l1_loss(out, r.gt);
            // same objective with the luminance mask ablated to all-ones:
            // the fidelity term pulls toward x_in everywhere, flares included
            if (cfg.lambda_fidelity > 0.0)
                loss = ag::add(loss,
                               ag::scale(ag::l1_loss(out, r.x_in), cfg.lambda_fidelity));
            total_u = total_u ? ag::add(total_u, loss) : loss;
        }
        total_u = ag::scale(total_u, 1.0 / cfg.batch);
        if (!std::isfinite(total_u->v[0]))
            throw TrainingError("train_affm: unguided loss diverged at step " +
                                std::to_string(step));
        ag::backward(total_u);
        opt_u.step();

        if (log && step % 50 == 0)
            (*log) << "affm step " << step << " guided " << total_g->v[0] << " unguided "
                   << total_u->v[0] << "\n";
    }

    if (vq.params().content_hash() != vq_hash)
        throw IntegrityError("train_affm: frozen VQ weights changed");
    if (denoiser.params().content_hash() != den_hash)
        throw IntegrityError("train_affm: frozen denoiser weights changed");
    if (sgim.params().content_hash() != sgim_hash)
        throw IntegrityError("train_affm: frozen SGIM weights changed");

    stats.final_loss = val_loss(guided, true);
    if (!(stats.final_loss < 0.7 * stats.initial))
        throw TrainingError("train_affm: validation L1 did not drop 30% (initial " +
                            std::to_string(stats.initial) + ", final " +
                            std::to_string(stats.final_loss) + ")");
    guided.params().freeze_all();
    unguided.params().freeze_all();
    return stats;
}

}  // namespace difflare
