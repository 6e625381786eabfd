#include "difflare/sgim.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "difflare/checkpoint.hpp"
#include "difflare/errors.hpp"

namespace difflare {

using nlohmann::json;
namespace ag = difflare::ag;

SgimModel::SgimModel(const DiffusionConfig& dcfg, uint64_t init_seed) : dcfg_(dcfg) {
    Rng rng(Rng::key(init_seed, "sgim.init"));
    int L = static_cast<int>(dcfg.widths.size());
    int cin = dcfg.latent_channels;
    for (int l = 0; l < L; ++l) {
        int stride = l == 0 ? 1 : 2;
        enc_.emplace_back(ps_, "enc" + std::to_string(l), cin, dcfg.widths[l], 3, stride, 1,
                          rng);
        enc_b_.emplace_back(ps_, "enc" + std::to_string(l) + "b", dcfg.widths[l],
                            dcfg.widths[l], 3, 1, 1, rng);
        cin = dcfg.widths[l];
        // zero-init so injection starts as the identity
        gamma_.emplace_back(ps_, "gamma" + std::to_string(l), dcfg.widths[l], dcfg.widths[l], 3,
                            1, 1, rng, /*zero_init=*/true);
        beta_.emplace_back(ps_, "beta" + std::to_string(l), dcfg.widths[l], dcfg.widths[l], 3,
                           1, 1, rng, /*zero_init=*/true);
    }
    z0_head_ = nn::Conv2d(ps_, "z0_head", dcfg.widths[0], dcfg.latent_channels, 3, 1, 1, rng);
    gate_head_ = nn::Conv2d(ps_, "gate_head", dcfg.widths[0], dcfg.latent_channels, 3, 1, 1,
                            rng, /*zero_init=*/true);
}

GuidancePyramid SgimModel::extract_guidance_t(const ag::Tensor& z_in) const {
    if (z_in->shape.size() != 3 || z_in->shape[0] != dcfg_.latent_channels)
        throw ConfigError("extract_guidance: latent shape incompatible with configured levels");
    GuidancePyramid p;
    ag::Tensor h = z_in;
    for (size_t l = 0; l < enc_.size(); ++l) {
        h = ag::silu(enc_b_[l](ag::silu(enc_[l](h))));
        p.feats.push_back(h);
    }
    return p;
}

GuidancePyramid SgimModel::extract_guidance(const LatentTensor& z_in) const {
    return extract_guidance_t(latent_to_tensor(z_in));
}

SpadeHooks SgimModel::hooks(const GuidancePyramid& p) const {
    if (p.feats.size() != enc_.size())
        throw ConfigError("guidance pyramid level count mismatch");
    SpadeHooks h(enc_.size());
    for (size_t l = 0; l < enc_.size(); ++l) {
        h[l].gamma = &gamma_[l];
        h[l].beta = &beta_[l];
        h[l].fea = p.feats[l];
    }
    h[0].z0_head = &z0_head_;
    h[0].gate_head = &gate_head_;
    return h;
}

void SgimModel::save(const std::string& path, const std::string& extra_json) const {
    Checkpoint ck;
    ck.arrays = ps_.dump();
    json c = {{"widths", dcfg_.widths},
              {"latent_channels", dcfg_.latent_channels},
              {"latent_size", dcfg_.latent_size},
              {"temb_dim", dcfg_.temb_dim},
              {"cond_dim", dcfg_.cond_dim},
              {"vocab", dcfg_.vocab},
              {"T", dcfg_.T},
              {"beta_start", dcfg_.beta_start},
              {"beta_end", dcfg_.beta_end},
              {"schedule", dcfg_.schedule}};
    ck.config_text = c.dump();
    ck.extra_text = extra_json;
    save_checkpoint(path, ck);
}

SgimModel SgimModel::load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    json c = ck.config();
    DiffusionConfig cfg;
    cfg.widths = c["widths"].get<std::vector<int>>();
    cfg.latent_channels = c["latent_channels"];
    cfg.latent_size = c["latent_size"];
    cfg.temb_dim = c["temb_dim"];
    cfg.cond_dim = c["cond_dim"];
    cfg.vocab = c["vocab"];
    cfg.T = c["T"];
    cfg.beta_start = c["beta_start"];
    cfg.beta_end = c["beta_end"];
    cfg.schedule = c["schedule"];
    SgimModel m(cfg, 0);
    m.ps_.load(ck.arrays);
    return m;
}

TrainStats train_sgim(SgimModel& sgim, const DenoiserModel& denoiser, const VqModel& vq,
                      const DatasetStream& train, const DatasetStream& val,
                      const SgimConfig& cfg, uint64_t seed, std::ostream* log) {
    uint64_t denoiser_hash = denoiser.params().content_hash();
    uint64_t vq_hash = vq.params().content_hash();

    const DiffusionConfig& dcfg = denoiser.cfg();
    NoiseSchedule ns = build_schedule(dcfg.T, dcfg.beta_start, dcfg.beta_end, dcfg.schedule);

    // paired latents: condition on the corrupted input, denoise toward clean
    struct Pair {
        LatentTensor z_in, z0;
    };
    std::vector<Pair> pairs, vpairs;
    for (int i = 0; i < train.size(); ++i) {
        FlareSample s = train.sample(i);
        pairs.push_back({vq.encode(s.input), vq.encode(s.gt)});
    }
    int nval = std::min(8, val.size());
    for (int i = 0; i < nval; ++i) {
        FlareSample s = val.sample(i);
        vpairs.push_back({vq.encode(s.input), vq.encode(s.gt)});
    }
    if (pairs.empty() || vpairs.empty()) throw CorpusError("train_sgim: empty stream");

    struct Triple {
        int pair_idx, t;
        LatentTensor eps;
    };
    std::vector<Triple> vt;
    {
        Rng vrng(Rng::key(seed, "sgim.val"));
        for (size_t i = 0; i < vpairs.size() * 4; ++i) {
            Triple tr;
            tr.pair_idx = static_cast<int>(i % vpairs.size());
            tr.t = vrng.uniform_int(dcfg.T);
            tr.eps = LatentTensor(dcfg.latent_channels, dcfg.latent_size, dcfg.latent_size);
            for (auto& v : tr.eps.v) v = vrng.normal();
            vt.push_back(std::move(tr));
        }
    }
    auto val_loss = [&]() {
        double s = 0;
        for (auto& tr : vt) {
            const Pair& p = vpairs[tr.pair_idx];
            SpadeHooks hooks = sgim.hooks(sgim.extract_guidance(p.z_in));
            LatentTensor zt = q_sample(p.z0, tr.t, tr.eps, ns);
            ag::Tensor pred =
                denoiser.forward(latent_to_tensor(zt), tr.t, Condition::null(), &hooks);
            s += ag::mse_loss(pred, latent_to_tensor(tr.eps))->v[0];
        }
        return s / static_cast<double>(vt.size());
    };

    sgim.params().set_requires_grad();
    nn::Adam opt(sgim.params(), cfg.lr);
    TrainStats stats;
    stats.initial = val_loss();

    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(Rng::key(seed, "sgim.step", step));
        opt.zero_grad();
        ag::Tensor total;
        for (int b = 0; b < cfg.batch; ++b) {
            const Pair& p = pairs[rng.uniform_int(static_cast<int>(pairs.size()))];
            int t = rng.uniform_int(dcfg.T);
            LatentTensor eps(dcfg.latent_channels, dcfg.latent_size, dcfg.latent_size);
            for (auto& v : eps.v) v = rng.normal();
            SpadeHooks hooks = sgim.hooks(sgim.extract_guidance(p.z_in));
            LatentTensor zt = q_sample(p.z0, t, eps, ns);
            ag::Tensor pred =
                denoiser.forward(latent_to_tensor(zt), t, Condition::null(), &hooks);
            ag::Tensor loss = ag::mse_loss(pred, latent_to_tensor(eps));
            total = total ? ag::add(total, loss) : loss;
        }
        total = ag::scale(total, 1.0 / cfg.batch);
        if (!std::isfinite(total->v[0]))
            throw TrainingError("train_sgim: loss diverged at step " + std::to_string(step));
        ag::backward(total);
        // the analytic-head path can spike gradients at small t; clip globally
        double g2 = 0;
        for (auto& p : sgim.params().params())
            for (double g : p.t->g) g2 += g * g;
        if (g2 > 1.0) {
            double inv = 1.0 / std::sqrt(g2);
            for (auto& p : sgim.params().params())
                for (double& g : p.t->g) g *= inv;
        }
        opt.step();
        if (log && step % 50 == 0)
            (*log) << "sgim step " << step << " loss " << total->v[0] << "\n";

        // freeze contract verified as training proceeds, hard fail on drift
        if (step % 100 == 99) {
            if (denoiser.params().content_hash() != denoiser_hash)
                throw IntegrityError("train_sgim: frozen denoiser weights changed");
            if (vq.params().content_hash() != vq_hash)
                throw IntegrityError("train_sgim: frozen VQ weights changed");
        }
    }

    if (denoiser.params().content_hash() != denoiser_hash)
        throw IntegrityError("train_sgim: frozen denoiser weights changed");
    if (vq.params().content_hash() != vq_hash)
        throw IntegrityError("train_sgim: frozen VQ weights changed");

    stats.final_loss = val_loss();
    if (!(stats.final_loss < 0.7 * stats.initial))
        throw TrainingError("train_sgim: validation loss did not drop 30% (initial " +
                            std::to_string(stats.initial) + ", final " +
                            std::to_string(stats.final_loss) + ")");
    sgim.params().freeze_all();
    return stats;
}

}  // namespace difflare
