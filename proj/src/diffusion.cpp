#include "difflare/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "difflare/checkpoint.hpp"
#include "difflare/errors.hpp"

namespace difflare {

using nlohmann::json;
namespace ag = difflare::ag;

NoiseSchedule build_schedule(int T, double beta_start, double beta_end,
                             const std::string& kind) {
    if (T < 1) throw ParameterError("schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ParameterError("schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule ns;
    ns.T = T;
    ns.beta.resize(T);
    if (kind == "linear") {
        for (int t = 0; t < T; ++t)
            ns.beta[t] = T == 1 ? beta_start
                                : beta_start + (beta_end - beta_start) * t / (T - 1.0);
    } else if (kind == "cosine") {
        auto f = [T](double t) {
            double v = std::cos((t / T + 0.008) / 1.008 * 1.5707963267948966);
            return v * v;
        };
        for (int t = 0; t < T; ++t)
            ns.beta[t] = std::clamp(1.0 - f(t + 1.0) / f(static_cast<double>(t)), beta_start,
                                    0.999);
    } else {
        throw ParameterError("schedule: unknown kind " + kind);
    }
    ns.alpha.resize(T);
    ns.alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        ns.alpha[t] = 1.0 - ns.beta[t];
        prod *= ns.alpha[t];
        ns.alpha_bar[t] = prod;
    }
    return ns;
}

LatentTensor q_sample(const LatentTensor& z0, int t, const LatentTensor& eps,
                      const NoiseSchedule& ns) {
    if (t < 0 || t >= ns.T) throw ParameterError("q_sample: t out of range");
    if (z0.v.size() != eps.v.size()) throw DimensionError("q_sample: shape mismatch");
    double sa = std::sqrt(ns.alpha_bar[t]), sb = std::sqrt(1.0 - ns.alpha_bar[t]);
    LatentTensor out(z0.c, z0.h, z0.w);
    for (size_t i = 0; i < z0.v.size(); ++i) out.v[i] = sa * z0.v[i] + sb * eps.v[i];
    return out;
}

ag::Tensor latent_to_tensor(const LatentTensor& z) {
    return ag::constant({z.c, z.h, z.w}, z.v);
}

LatentTensor tensor_to_latent(const ag::Tensor& t) {
    if (t->shape.size() != 3) throw DimensionError("tensor_to_latent: want rank 3");
    LatentTensor z(t->shape[0], t->shape[1], t->shape[2]);
    z.v = t->v;
    return z;
}

namespace detail {

ResBlock::ResBlock(nn::ParamStore& ps, const std::string& name, int cin, int cout,
                   int temb_dim, Rng& rng)
    : gn1(ps, name + ".gn1", cin, 8),
      gn2(ps, name + ".gn2", cout, 8),
      conv1(ps, name + ".conv1", cin, cout, 3, 1, 1, rng),
      conv2(ps, name + ".conv2", cout, cout, 3, 1, 1, rng),
      temb_proj(ps, name + ".temb", temb_dim, cout, rng) {
    if (cin != cout) {
        skip = nn::Conv2d(ps, name + ".skip", cin, cout, 1, 1, 0, rng);
        has_skip = true;
    }
}

ag::Tensor ResBlock::forward(const ag::Tensor& x, const ag::Tensor& temb,
                             const SpadeLevel* spade) const {
    ag::Tensor h = gn1(x);
    if (spade && spade->fea) {
        // h * (1 + g*gamma(Fea)) + g*beta(Fea); zero-init convs keep this the identity
        ag::Tensor g = ag::scale((*spade->gamma)(spade->fea), spade->gain);
        ag::Tensor b = ag::scale((*spade->beta)(spade->fea), spade->gain);
        h = ag::add(ag::mul(h, ag::add_scalar(g, 1.0)), b);
    }
    h = conv1(ag::silu(h));
    h = ag::add_channel_bias(h, temb_proj(temb));
    h = conv2(ag::silu(gn2(h)));
    ag::Tensor s = has_skip ? skip(x) : x;
    return ag::add(s, h);
}

SelfAttn::SelfAttn(nn::ParamStore& ps, const std::string& name, int channels, Rng& rng)
    : gn(ps, name + ".gn", channels, 8) {
    wq = ps.add(name + ".wq", {channels, channels});
    wk = ps.add(name + ".wk", {channels, channels});
    wv = ps.add(name + ".wv", {channels, channels});
    wo = ps.add(name + ".wo", {channels, channels});
    nn::kaiming_init(wq, channels, rng);
    nn::kaiming_init(wk, channels, rng);
    nn::kaiming_init(wv, channels, rng);
    nn::kaiming_init(wo, channels, rng);
}

ag::Tensor SelfAttn::forward(const ag::Tensor& x) const {
    int h = x->shape[1], w = x->shape[2], c = x->shape[0];
    ag::Tensor tok = ag::chw_to_nc(gn(x));
    ag::Tensor q = ag::matmul(tok, wq), k = ag::matmul(tok, wk), v = ag::matmul(tok, wv);
    ag::Tensor scores = ag::scale(ag::matmul(q, ag::transpose(k)), 1.0 / std::sqrt(c));
    ag::Tensor out = ag::matmul(ag::softmax_rows(scores), v);
    return ag::add(x, ag::nc_to_chw(ag::matmul(out, wo), h, w));
}

}  // namespace detail

DenoiserModel::DenoiserModel(const DiffusionConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    for (int wdt : cfg.widths)
        if (wdt % 8) throw ConfigError("diffusion.widths must be divisible by 8");
    if (cfg.latent_size % (1 << (cfg.widths.size() - 1)))
        throw ConfigError("latent size not divisible across UNet levels");
    Rng rng(Rng::key(init_seed, "diffusion.init"));
    int L = static_cast<int>(cfg.widths.size());
    int c = cfg.latent_channels;

    temb1_ = nn::Linear(ps_, "temb1", cfg.temb_dim, cfg.temb_dim, rng);
    temb2_ = nn::Linear(ps_, "temb2", cfg.temb_dim, cfg.temb_dim, rng);
    cond_proj_ = nn::Linear(ps_, "cond_proj", cfg.cond_dim, cfg.temb_dim, rng);
    token_embed_ = ps_.add("token_embed", {cfg.vocab, cfg.cond_dim});
    nn::init_uniform(token_embed_, 0.5, rng);

    conv_in_ = nn::Conv2d(ps_, "conv_in", c, cfg.widths[0], 3, 1, 1, rng);
    for (int l = 0; l < L; ++l) {
        res_down_.emplace_back(ps_, "down" + std::to_string(l), cfg.widths[l], cfg.widths[l],
                               cfg.temb_dim, rng);
        if (l + 1 < L)
            down_.emplace_back(ps_, "downconv" + std::to_string(l), cfg.widths[l],
                               cfg.widths[l + 1], 4, 2, 1, rng);
    }
    attn_ = detail::SelfAttn(ps_, "attn", cfg.widths[L - 1], rng);
    res_mid_ = detail::ResBlock(ps_, "mid", cfg.widths[L - 1], cfg.widths[L - 1], cfg.temb_dim,
                                rng);
    for (int l = L - 2; l >= 0; --l) {
        up_.emplace_back(ps_, "upconv" + std::to_string(l), cfg.widths[l + 1], cfg.widths[l], 3,
                         1, 1, rng);
        res_up_.emplace_back(ps_, "up" + std::to_string(l), 2 * cfg.widths[l], cfg.widths[l],
                             cfg.temb_dim, rng);
    }
    gn_out_ = nn::GroupNorm(ps_, "gn_out", cfg.widths[0], 8);
    conv_out_ = nn::Conv2d(ps_, "conv_out", cfg.widths[0], c, 3, 1, 1, rng, /*zero_init=*/true);
    ns_ = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule);
}

ag::Tensor DenoiserModel::forward(const ag::Tensor& z_t, int t, const Condition& cond,
                                  const SpadeHooks* hooks) const {
    if (z_t->shape != std::vector<int>{cfg_.latent_channels, cfg_.latent_size, cfg_.latent_size})
        throw DimensionError("denoiser: unexpected latent shape");
    int L = levels();
    if (hooks && static_cast<int>(hooks->size()) != L)
        throw ConfigError("denoiser: guidance level count does not match UNet levels");
    if (t < 0 || t >= cfg_.T) throw ParameterError("denoiser: t out of range");

    SpadeHooks gained;
    if (hooks) {
        double ab = ns_.alpha_bar[t];
        double gain = std::min(20.0, std::sqrt(ab / std::max(1e-12, 1.0 - ab)));
        gained = *hooks;
        for (auto& sp : gained) sp.gain = gain;
        hooks = &gained;
    }

    ag::Tensor temb = ag::constant({cfg_.temb_dim}, nn::timestep_embedding(t, cfg_.temb_dim));
    temb = temb2_(ag::silu(temb1_(temb)));
    if (cond.token) {
        if (*cond.token < 0 || *cond.token >= cfg_.vocab)
            throw ParameterError("condition token out of vocabulary");
        temb = ag::add(temb, cond_proj_(ag::select_row(token_embed_, *cond.token)));
    }

    ag::Tensor h = conv_in_(z_t);
    std::vector<ag::Tensor> skips;
    for (int l = 0; l < L; ++l) {
        const SpadeLevel* sp = hooks ? &(*hooks)[l] : nullptr;
        if (sp && sp->fea &&
            (sp->fea->shape[1] != h->shape[1] || sp->fea->shape[2] != h->shape[2]))
            throw ConfigError("guidance resolution mismatch at level " + std::to_string(l));
        h = res_down_[l].forward(h, temb, sp);
        skips.push_back(h);
        if (l + 1 < L) h = down_[l](h);
    }
    h = attn_.forward(h);
    h = res_mid_.forward(h, temb, hooks ? &(*hooks)[L - 1] : nullptr);
    for (int i = 0; i < L - 1; ++i) {
        int l = L - 2 - i;
        h = up_[i](ag::upsample2x(h));
        h = ag::concat_ch(h, skips[l]);
        h = res_up_[i].forward(h, temb, nullptr);
        // second injection site on the up path: same per-level modulation applied
        // to the block output, where it has a short path to the prediction head
        const SpadeLevel* sp = hooks ? &(*hooks)[l] : nullptr;
        if (sp && sp->fea) {
            ag::Tensor g = (*sp->gamma)(sp->fea);
            ag::Tensor b = (*sp->beta)(sp->fea);
            h = ag::add(ag::mul(h, ag::add_scalar(g, 1.0)), b);
        }
    }
    ag::Tensor out = conv_out_(ag::silu(gn_out_(h)));
    if (hooks) {
        const SpadeLevel& sp0 = (*hooks)[0];
        if (sp0.fea && sp0.z0_head && sp0.gate_head) {
            double ab = ns_.alpha_bar[t];
            double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
            ag::Tensor z0_hat = (*sp0.z0_head)(sp0.fea);
            ag::Tensor analytic = ag::scale(ag::sub(z_t, ag::scale(z0_hat, sa)), 1.0 / sb);
            // bounded spatial gate, scaled by the optimal blend weight for an
            // assumed z0_hat error variance; keeps the 1/sqrt(1-ab) blow-up at
            // tiny t from dominating the objective
            const double err_var = 0.005;
            double prior = (1.0 - ab) / ((1.0 - ab) + ab * err_var);
            ag::Tensor gate = ag::add_scalar(
                ag::scale(ag::sigmoid((*sp0.gate_head)(sp0.fea)), 2.0), -1.0);
            out = ag::add(out, ag::mul(ag::scale(gate, prior), ag::sub(analytic, out)));
        }
    }
    return out;
}

LatentTensor predict_noise(const DenoiserModel& m, const LatentTensor& z_t, int t,
                           const Condition& cond, const SpadeHooks* hooks) {
    return tensor_to_latent(m.forward(latent_to_tensor(z_t), t, cond, hooks));
}

LatentTensor cfg_noise(const DenoiserModel& m, const LatentTensor& z_t, int t,
                       const Condition& cond, double s, const SpadeHooks* hooks) {
    if (s < 0.0) throw ParameterError("guidance scale must be >= 0");
    if (!cond.token) return predict_noise(m, z_t, t, Condition::null(), hooks);
    LatentTensor ec = predict_noise(m, z_t, t, cond, hooks);
    if (s == 0.0) return ec;
    LatentTensor en = predict_noise(m, z_t, t, Condition::null(), hooks);
    LatentTensor out(ec.c, ec.h, ec.w);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = (1.0 + s) * ec.v[i] - s * en.v[i];
    return out;
}

LatentTensor sample(const DenoiserModel& m, const NoiseSchedule& ns, const SpadeHooks* hooks,
                    const Condition& cond, double guidance_scale, uint64_t seed) {
    const auto& cfg = m.cfg();
    LatentTensor z(cfg.latent_channels, cfg.latent_size, cfg.latent_size);
    Rng rng(Rng::key(seed, "sample.init"));
    for (auto& v : z.v) v = rng.normal();
    for (int t = ns.T - 1; t >= 0; --t) {
        LatentTensor eps = cfg_noise(m, z, t, cond, guidance_scale, hooks);
        double a = ns.alpha[t], ab = ns.alpha_bar[t], b = ns.beta[t];
        double inv_sa = 1.0 / std::sqrt(a);
        double coef = b / std::sqrt(1.0 - ab);
        Rng step_rng(Rng::key(seed, "sample.step", t));
        for (size_t i = 0; i < z.v.size(); ++i) {
            double mean = inv_sa * (z.v[i] - coef * eps.v[i]);
            double v = (t > 0) ? mean + std::sqrt(b) * step_rng.normal() : mean;
            if (std::isnan(v))
                throw SamplingError("NaN in sampling trajectory at step " + std::to_string(t));
            z.v[i] = std::clamp(v, -100.0, 100.0);
        }
    }
    return z;
}

void DenoiserModel::save(const std::string& path, const std::string& extra_json) const {
    Checkpoint ck;
    ck.arrays = ps_.dump();
    json c = {{"T", cfg_.T},
              {"beta_start", cfg_.beta_start},
              {"beta_end", cfg_.beta_end},
              {"schedule", cfg_.schedule},
              {"widths", cfg_.widths},
              {"temb_dim", cfg_.temb_dim},
              {"cond_dim", cfg_.cond_dim},
              {"vocab", cfg_.vocab},
              {"latent_channels", cfg_.latent_channels},
              {"latent_size", cfg_.latent_size},
              {"lr", cfg_.lr},
              {"steps", cfg_.steps},
              {"batch", cfg_.batch},
              {"cond_dropout", cfg_.cond_dropout}};
    ck.config_text = c.dump();
    ck.extra_text = extra_json;
    save_checkpoint(path, ck);
}

DenoiserModel DenoiserModel::load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    json c = ck.config();
    DiffusionConfig cfg;
    cfg.T = c["T"];
    cfg.beta_start = c["beta_start"];
    cfg.beta_end = c["beta_end"];
    cfg.schedule = c["schedule"];
    cfg.widths = c["widths"].get<std::vector<int>>();
    cfg.temb_dim = c["temb_dim"];
    cfg.cond_dim = c["cond_dim"];
    cfg.vocab = c["vocab"];
    cfg.latent_channels = c["latent_channels"];
    cfg.latent_size = c["latent_size"];
    cfg.lr = c["lr"];
    cfg.steps = c["steps"];
    cfg.batch = c["batch"];
    cfg.cond_dropout = c["cond_dropout"];
    DenoiserModel m(cfg, 0);
    m.ps_.load(ck.arrays);
    return m;
}

TrainStats pretrain_diffusion(DenoiserModel& m, const std::vector<LatentTensor>& train,
                              const std::vector<LatentTensor>& val, uint64_t seed,
                              std::ostream* log) {
    if (train.empty() || val.empty()) throw CorpusError("pretrain_diffusion: empty corpus");
    const auto& cfg = m.cfg();
    NoiseSchedule ns = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule);

    // fixed validation triples (latent, t, eps)
    struct Triple {
        LatentTensor zt, eps;
        int t;
    };
    std::vector<Triple> vt;
    {
        Rng vrng(Rng::key(seed, "diffusion.val"));
        for (size_t i = 0; i < val.size() * 4; ++i) {
            const LatentTensor& z0 = val[i % val.size()];
            int t = vrng.uniform_int(cfg.T);
            LatentTensor eps(z0.c, z0.h, z0.w);
            for (auto& v : eps.v) v = vrng.normal();
            vt.push_back({q_sample(z0, t, eps, ns), eps, t});
        }
    }
    auto val_loss = [&]() {
        double s = 0;
        for (auto& tr : vt) {
            ag::Tensor pred =
                m.forward(latent_to_tensor(tr.zt), tr.t, Condition::of(0), nullptr);
            s += ag::mse_loss(pred, latent_to_tensor(tr.eps))->v[0];
        }
        return s / static_cast<double>(vt.size());
    };

    m.params().set_requires_grad();
    nn::Adam opt(m.params(), cfg.lr);
    TrainStats stats;
    stats.initial = val_loss();

    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(Rng::key(seed, "diffusion.step", step));
        opt.zero_grad();
        ag::Tensor total;
        for (int b = 0; b < cfg.batch; ++b) {
            const LatentTensor& z0 = train[rng.uniform_int(static_cast<int>(train.size()))];
            int t = rng.uniform_int(cfg.T);
            LatentTensor eps(z0.c, z0.h, z0.w);
            for (auto& v : eps.v) v = rng.normal();
            Condition cond = rng.uniform() < cfg.cond_dropout ? Condition::null()
                                                              : Condition::of(0);
            ag::Tensor pred =
                m.forward(latent_to_tensor(q_sample(z0, t, eps, ns)), t, cond, nullptr);
            ag::Tensor loss = ag::mse_loss(pred, latent_to_tensor(eps));
            total = total ? ag::add(total, loss) : loss;
        }
        total = ag::scale(total, 1.0 / cfg.batch);
        if (!std::isfinite(total->v[0]))
            throw TrainingError("pretrain_diffusion: loss diverged at step " +
                                std::to_string(step));
        ag::backward(total);
        opt.step();
        if (log && step % 50 == 0)
            (*log) << "diffusion step " << step << " loss " << total->v[0] << "\n";
    }

    stats.final_loss = val_loss();
    if (!(stats.final_loss < 0.7 * stats.initial))
        throw TrainingError("pretrain_diffusion: validation loss did not drop 30% (initial " +
                            std::to_string(stats.initial) + ", final " +
                            std::to_string(stats.final_loss) + ")");
    m.params().freeze_all();
    return stats;
}

}  // namespace difflare
