// End-to-end acceptance suite. Runs every check in order and prints one
// [PASS]/[FAIL] line per criterion; exit status 0 iff all pass.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "difflare/errors.hpp"
#include "difflare/pipeline.hpp"

using namespace difflare;
namespace ag = difflare::ag;
namespace fs = std::filesystem;

namespace {

struct Harness {
    int failures = 0;
    void run(int id, const std::string& title, const std::function<void()>& fn) {
        try {
            fn();
            std::printf("[PASS] criterion %2d: %s\n", id, title.c_str());
        } catch (const std::exception& e) {
            ++failures;
            std::printf("[FAIL] criterion %2d: %s -- %s\n", id, title.c_str(), e.what());
        }
        std::fflush(stdout);
    }
};

struct CheckFail : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& msg) {
    if (!ok) throw CheckFail(msg);
}

DiffusionConfig tiny_diffusion() {
    DiffusionConfig c;
    c.T = 10;
    c.widths = {8, 16, 16};
    c.temb_dim = 16;
    c.cond_dim = 8;
    c.vocab = 4;
    c.latent_channels = 2;
    c.latent_size = 8;
    return c;
}

LatentTensor random_latent(int c, int h, int w, uint64_t seed) {
    LatentTensor z(c, h, w);
    Rng rng(seed);
    for (auto& v : z.v) v = rng.normal();
    return z;
}

RunConfig acceptance_config(const std::string& out_dir) {
    RunConfig c;
    c.seed = 7;
    c.out_dir = out_dir;
    c.corpus.train_backgrounds = 48;
    c.corpus.test_backgrounds = 32;
    c.corpus.crop = 64;
    c.corpus.seed = 7;
    c.vq.width = 32;
    c.vq.embed_dim = 8;
    c.vq.codebook = 64;
    c.vq.steps = 900;
    c.vq.target_psnr = 20.0;
    c.diffusion.widths = {32, 48, 48};
    c.diffusion.temb_dim = 64;
    c.diffusion.cond_dim = 16;
    c.diffusion.vocab = 4;
    c.diffusion.latent_channels = 8;
    c.diffusion.latent_size = 16;
    c.diffusion.beta_end = 0.05;
    c.diffusion.steps = 350;
    c.diffusion.batch = 6;
    c.sgim.lr = 0.001;
    c.sgim.steps = 1500;
    c.sgim.batch = 6;
    c.affm.width = 32;
    c.affm.steps = 1000;
    c.affm.cache_samples = 32;
    c.affm.noflare_prob = 0.1;
    c.affm.lambda_fidelity = 0.1;
    c.affm.lr = 0.002;
    c.eval.images = 32;
    c.eval.panels = false;
    return c;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// independent scalar attention for criterion 5
std::vector<double> oracle_attention(const std::vector<double>& x, int n, int d,
                                     const std::vector<double>& wq,
                                     const std::vector<double>& wk,
                                     const std::vector<double>& wv,
                                     const std::vector<double>& mask_row) {
    auto project = [&](const std::vector<double>& w) {
        std::vector<double> out(static_cast<size_t>(n) * d, 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                for (int k = 0; k < d; ++k)
                    out[static_cast<size_t>(i) * d + j] +=
                        x[static_cast<size_t>(i) * d + k] * w[static_cast<size_t>(k) * d + j];
        return out;
    };
    std::vector<double> Q = project(wq), K = project(wk), V = project(wv);
    std::vector<double> out(static_cast<size_t>(n) * d, 0.0);
    for (int i = 0; i < n; ++i) {
        std::vector<double> s(n);
        for (int j = 0; j < n; ++j) {
            double dot = 0;
            for (int k = 0; k < d; ++k)
                dot += Q[static_cast<size_t>(i) * d + k] * K[static_cast<size_t>(j) * d + k];
            s[j] = dot / std::sqrt(d);
            if (!mask_row.empty()) s[j] *= mask_row[j];
        }
        double mx = *std::max_element(s.begin(), s.end());
        double z = 0;
        for (int j = 0; j < n; ++j) z += std::exp(s[j] - mx);
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < d; ++k)
                out[static_cast<size_t>(i) * d + k] +=
                    std::exp(s[j] - mx) / z * V[static_cast<size_t>(j) * d + k];
    }
    return out;
}

}  // namespace

int main() {
    Harness h;

    // ---- fast algebraic / statistical criteria ----------------------------

    h.run(1, "classifier-free guidance identities are bit-exact", [] {
        DenoiserModel m(tiny_diffusion(), 5);
        for (int rep = 0; rep < 20; ++rep) {
            LatentTensor zt = random_latent(2, 8, 8, 100 + rep);
            int t = rep % 10;
            LatentTensor cc = predict_noise(m, zt, t, Condition::of(1));
            LatentTensor en = predict_noise(m, zt, t, Condition::null());
            expect(cfg_noise(m, zt, t, Condition::of(1), 0.0).v == cc.v,
                   "s=0 must equal the conditional prediction");
            for (double s : {0.0, 0.7, 2.5})
                expect(cfg_noise(m, zt, t, Condition::null(), s).v == en.v,
                       "NULL condition must equal the unconditional prediction");
            LatentTensor c1 = cfg_noise(m, zt, t, Condition::of(1), 1.0);
            for (size_t i = 0; i < c1.v.size(); ++i)
                expect(c1.v[i] == 2.0 * cc.v[i] - en.v[i], "s=1 must equal 2ec-en");
        }
    });

    h.run(3, "zero-initialized SPADE injection is the identity", [] {
        DiffusionConfig dc = tiny_diffusion();
        DenoiserModel m(dc, 6);
        SgimModel sgim(dc, 7);
        for (int rep = 0; rep < 100; ++rep) {
            LatentTensor zt = random_latent(2, 8, 8, 300 + rep);
            SpadeHooks hooks = sgim.hooks(sgim.extract_guidance(zt));
            expect(predict_noise(m, zt, rep % 10, Condition::of(0), &hooks).v ==
                       predict_noise(m, zt, rep % 10, Condition::of(0), nullptr).v,
                   "guided and unguided predictions must be bit-identical at init");
        }
    });

    h.run(4, "luminance mask thresholding, pooling and activation", [] {
        ImageRGB black(8, 8), white(8, 8);
        for (auto& v : white.px) v = 1.0;
        for (auto m : luminance_mask(black, 0.85).mask) expect(m == 1, "black -> all ones");
        for (auto m : luminance_mask(white, 0.85).mask) expect(m == 0, "white -> all zeros");
        ImageRGB img(16, 16);
        Rng rng(42);
        for (auto& p : img.px) p = rng.uniform();
        LuminanceMask lo = luminance_mask(img, 0.3), hi = luminance_mask(img, 0.9);
        for (size_t i = 0; i < lo.mask.size(); ++i)
            expect(!lo.mask[i] || hi.mask[i], "mask must be monotone in s");
        AttentionMask am = to_attention_mask(luminance_mask(img, 0.6), 4, 4);
        std::vector<double> full = am.materialize();
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j)
                expect(full[static_cast<size_t>(i) * 16 + j] == am.row[j], "rows constant");
        for (double v : am.row)
            expect(v >= 0.0 && v <= silu_scalar(1.0), "row outside silu range");
        LuminanceMask hand;
        hand.h = 4;
        hand.w = 4;
        hand.mask = {1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 1, 1, 0, 1, 1, 1};
        AttentionMask ham = to_attention_mask(hand, 2, 2);
        const double want_pool[4] = {0.75, 0.0, 0.25, 1.0};
        for (int i = 0; i < 4; ++i) {
            expect(std::abs(ham.pooled[i] - want_pool[i]) < 1e-12, "pooled value wrong");
            expect(std::abs(ham.row[i] - silu_scalar(want_pool[i])) < 1e-12, "silu wrong");
        }
    });

    h.run(5, "masked attention matches a scalar brute-force oracle", [] {
        Rng rng(71);
        for (int rep = 0; rep < 200; ++rep) {
            int n = 2 + rng.uniform_int(7);
            int d = 2 + rng.uniform_int(5);
            std::vector<double> x(static_cast<size_t>(n) * d), wq(static_cast<size_t>(d) * d),
                wk(wq.size()), wv(wq.size()), row(n);
            for (auto& v : x) v = rng.normal();
            for (auto& v : wq) v = 0.5 * rng.normal();
            for (auto& v : wk) v = 0.5 * rng.normal();
            for (auto& v : wv) v = 0.5 * rng.normal();
            for (auto& v : row) v = rng.uniform();
            bool use_mask = rep % 2 == 0;
            std::vector<double> want = oracle_attention(
                x, n, d, wq, wk, wv, use_mask ? row : std::vector<double>{});
            ag::Tensor tx = ag::constant({n, d}, x);
            ag::Tensor got = masked_attention(
                tx, tx, tx, use_mask ? row : std::vector<double>{},
                ag::constant({d, d}, wq), ag::constant({d, d}, wk),
                ag::constant({d, d}, wv), false);
            for (size_t i = 0; i < want.size(); ++i)
                expect(std::abs(got->v[i] - want[i]) < 1e-6, "oracle mismatch");
        }
    });

    h.run(6, "q_sample statistics and schedule invariants", [] {
        for (auto kind : {"linear", "cosine"})
            for (int T : {10, 200, 1000}) {
                NoiseSchedule ns = build_schedule(T, 1e-4, 0.02, kind);
                for (int t = 1; t < T; ++t)
                    expect(ns.alpha_bar[t] < ns.alpha_bar[t - 1],
                           "alpha_bar must strictly decrease");
            }
        NoiseSchedule ns = build_schedule(200, 1e-4, 0.02);
        int t = 120;
        LatentTensor z0(1, 1, 1);
        z0.v[0] = 0.7;
        double want_mean = std::sqrt(ns.alpha_bar[t]) * 0.7;
        double want_var = 1.0 - ns.alpha_bar[t];
        Rng rng(99);
        double m = 0, m2 = 0;
        const int N = 10000;
        for (int i = 0; i < N; ++i) {
            LatentTensor eps(1, 1, 1);
            eps.v[0] = rng.normal();
            double zt = q_sample(z0, t, eps, ns).v[0];
            m += zt;
            m2 += zt * zt;
        }
        m /= N;
        double var = m2 / N - m * m;
        expect(std::abs(m - want_mean) < 0.05 * std::max(std::abs(want_mean), 0.1),
               "q_sample mean off by more than 5%");
        expect(std::abs(var - want_var) / want_var < 0.05,
               "q_sample variance off by more than 5%");
    });

    h.run(7, "analytic gradients match finite differences", [] {
        auto check = [](const std::vector<ag::Tensor>& leaves,
                        const std::function<ag::Tensor()>& fwd, uint64_t seed,
                        const char* what) {
            for (const auto& t : leaves) std::fill(t->g.begin(), t->g.end(), 0.0);
            ag::backward(fwd());
            Rng rng(seed);
            const double step = 1e-5;
            for (int k = 0; k < 50; ++k) {
                ag::Tensor t = leaves[rng.uniform_int(static_cast<int>(leaves.size()))];
                size_t i = rng.next_u64() % t->v.size();
                double keep = t->v[i];
                t->v[i] = keep + step;
                double fp = fwd()->v[0];
                t->v[i] = keep - step;
                double fm = fwd()->v[0];
                t->v[i] = keep;
                double num = (fp - fm) / (2 * step);
                double ana = t->g[i];
                double rel =
                    std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6});
                expect(rel < 1e-2, std::string(what) + ": gradient mismatch");
            }
        };
        auto leaf = [](std::vector<int> shape, Rng& rng) {
            ag::Tensor t = ag::make(std::move(shape), true);
            for (auto& v : t->v) v = 0.5 * rng.normal();
            return t;
        };

        {  // SPADE-modulated residual block
            Rng init(201);
            nn::ParamStore ps;
            detail::ResBlock rb(ps, "rb", 8, 8, 16, init);
            nn::Conv2d gamma(ps, "g", 8, 8, 3, 1, 1, init), beta(ps, "b", 8, 8, 3, 1, 1, init);
            ps.set_requires_grad();
            Rng rng(202);
            ag::Tensor x = leaf({8, 4, 4}, rng), fea = leaf({8, 4, 4}, rng),
                       temb = leaf({16}, rng);
            SpadeLevel sp{&gamma, &beta, fea};
            std::vector<ag::Tensor> leaves{x, fea, temb};
            for (auto& p : ps.params()) leaves.push_back(p.t);
            check(leaves, [&] { return ag::mean_all(rb.forward(x, temb, &sp)); }, 51, "spade");
        }
        {  // RRDB block
            Rng init(301);
            nn::ParamStore ps;
            detail::Rrdb rrdb(ps, "rrdb", 8, 8, init);
            ps.set_requires_grad();
            Rng rng(302);
            ag::Tensor x = leaf({8, 4, 4}, rng);
            std::vector<ag::Tensor> leaves{x};
            for (auto& p : ps.params()) leaves.push_back(p.t);
            check(leaves, [&] { return ag::mean_all(rrdb.forward(x)); }, 52, "rrdb");
        }
        {  // masked attention layer
            Rng rng(401);
            int n = 6, width = 8;
            ag::Tensor q = leaf({n, width}, rng), wq = leaf({width, width}, rng),
                       wk = leaf({width, width}, rng), wv = leaf({width, width}, rng);
            std::vector<double> row(n);
            for (auto& v : row) v = rng.uniform();
            check({q, wq, wk, wv},
                  [&] {
                      return ag::mean_all(masked_attention(q, q, q, row, wq, wk, wv, false));
                  },
                  53, "attention");
        }
    });

    h.run(8, "synthesis is exact on flare-free pixels and replayable", [] {
        CorpusConfig cfg;
        cfg.train_backgrounds = 250;
        cfg.test_backgrounds = 8;
        cfg.samples_per_background = 4;  // 1000 samples
        cfg.crop = 64;
        cfg.seed = 17;
        DatasetStream ds(cfg, Split::train);
        expect(ds.size() == 1000, "expected 1000 samples");
        long flare_free_checked = 0;
        std::vector<uint64_t> fingerprints;
        for (int i = 0; i < ds.size(); ++i) {
            FlareSample s = ds.sample(i);
            for (int y = 0; y < s.gt.h; ++y)
                for (int x = 0; x < s.gt.w; ++x) {
                    bool ff = true;
                    for (int c = 0; c < 3; ++c)
                        if (s.reflective.at(y, x, c) != 0.0 || s.scattering.at(y, x, c) != 0.0)
                            ff = false;
                    if (!ff) continue;
                    ++flare_free_checked;
                    for (int c = 0; c < 3; ++c)
                        expect(s.input.at(y, x, c) == s.gt.at(y, x, c),
                               "x_in must equal GT exactly on flare-free pixels");
                }
            fingerprints.push_back(
                fnv1a64(s.input.px.data(), s.input.px.size() * sizeof(double)));
        }
        expect(flare_free_checked > 0, "no flare-free pixels found");
        // full regeneration from the same seed is bit-identical
        DatasetStream again(cfg, Split::train);
        for (int i = 0; i < again.size(); ++i) {
            FlareSample s = again.sample(i);
            expect(fnv1a64(s.input.px.data(), s.input.px.size() * sizeof(double)) ==
                       fingerprints[static_cast<size_t>(i)],
                   "regeneration must be bit-identical");
        }
    });

    h.run(12, "metric self-tests", [] {
        ImageRGB a(16, 16), b(16, 16), c(16, 16);
        for (auto& v : a.px) v = 0.5;
        for (auto& v : b.px) v = 0.6;
        for (auto& v : c.px) v = 0.51;
        expect(std::abs(psnr(a, b) - 20.0) < 1e-9, "uniform offset 0.1 must give 20 dB");
        expect(std::abs(psnr(a, c) - 40.0) < 1e-9, "uniform offset 0.01 must give 40 dB");
        Rng rng(5);
        ImageRGB r(16, 16);
        for (auto& v : r.px) v = rng.uniform();
        expect(std::abs(ssim(r, r) - 1.0) < 1e-12, "SSIM(a,a) must be 1");
    });

    // ---- staged training + end-to-end criteria ----------------------------

    std::string out_dir = (fs::temp_directory_path() / "difflare_acceptance").string();
    fs::remove_all(out_dir);
    RunConfig cfg = acceptance_config(out_dir);
    Pipeline pipe(cfg);
    bool trained = false;
    std::string vq_hash_after_vq, diff_hash_after_diff;

    h.run(11, "VQ roundtrip PSNR on held-out images", [&] {
        std::cerr << "  [training vq...]\n";
        pipe.run_stage("train-vq", &std::cerr);
        vq_hash_after_vq = file_hash(pipe.artifact("vq.ckpt"));
        VqModel vq = VqModel::load(pipe.artifact("vq.ckpt"));
        DatasetStream test(cfg.corpus, Split::test);
        double sum = 0;
        for (int i = 0; i < 32; ++i) {
            FlareSample s = test.sample(i);
            sum += psnr(vq.decode(vq.encode(s.gt)), s.gt);
        }
        double mean = sum / 32.0;
        std::cerr << "  [vq roundtrip mean psnr " << mean << " dB]\n";
        expect(mean >= cfg.vq.target_psnr,
               "mean roundtrip PSNR " + std::to_string(mean) + " below configured floor " +
                   std::to_string(cfg.vq.target_psnr));
    });

    h.run(2, "denoiser and VQ weights stay frozen across downstream stages", [&] {
        std::cerr << "  [training diffusion...]\n";
        pipe.run_stage("train-diffusion", &std::cerr);
        diff_hash_after_diff = file_hash(pipe.artifact("diffusion.ckpt"));
        std::cerr << "  [training sgim...]\n";
        pipe.run_stage("train-sgim", &std::cerr);
        expect(file_hash(pipe.artifact("vq.ckpt")) == vq_hash_after_vq,
               "VQ checkpoint changed during train-sgim");
        expect(file_hash(pipe.artifact("diffusion.ckpt")) == diff_hash_after_diff,
               "denoiser checkpoint changed during train-sgim");
        std::cerr << "  [training affm...]\n";
        pipe.run_stage("train-affm", &std::cerr);
        expect(file_hash(pipe.artifact("vq.ckpt")) == vq_hash_after_vq,
               "VQ checkpoint changed during train-affm");
        expect(file_hash(pipe.artifact("diffusion.ckpt")) == diff_hash_after_diff,
               "denoiser checkpoint changed during train-affm");
        // hard failure on tampered weights
        {
            std::fstream f(pipe.artifact("diffusion.ckpt"),
                           std::ios::in | std::ios::out | std::ios::binary);
            f.seekg(-8, std::ios::end);
            char b = 0;
            f.read(&b, 1);
            b = static_cast<char>(b ^ 0x5a);
            f.seekp(-8, std::ios::end);
            f.write(&b, 1);
        }
        bool threw = false;
        try {
            DenoiserModel::load(pipe.artifact("diffusion.ckpt"));
        } catch (const IntegrityError&) {
            threw = true;
        }
        expect(threw, "tampered checkpoint must hard-fail with an integrity error");
        // restore the intact stage output for the criteria below
        std::cerr << "  [retraining diffusion after tamper check...]\n";
        pipe.run_stage("train-diffusion", &std::cerr);
        expect(file_hash(pipe.artifact("diffusion.ckpt")) == diff_hash_after_diff,
               "re-run with identical config must reproduce the checkpoint bytes");
        trained = true;
    });

    EvalReport report;
    h.run(9, "restored beats input on the held-out set", [&] {
        expect(trained, "upstream training stages failed");
        std::cerr << "  [evaluating 32 held-out images...]\n";
        report = pipe.evaluate(&std::cerr);
        pipe.write_eval_artifacts(report);
        std::vector<double> in_psnr, full_psnr;
        int improved = 0;
        for (const auto& row : report.rows) {
            double pi = row.variants[0].psnr_db;   // input
            double pf = row.variants[3].psnr_db;   // full
            in_psnr.push_back(pi);
            full_psnr.push_back(pf);
            if (pf > pi) ++improved;
        }
        double med_in = median(in_psnr), med_full = median(full_psnr);
        double frac = static_cast<double>(improved) / report.rows.size();
        std::cerr << "  [median input " << med_in << " dB, median restored " << med_full
                  << " dB, improved " << 100 * frac << "%]\n";
        expect(med_full > med_in, "median restored PSNR must exceed median input PSNR");
        expect(frac >= 0.70, "restored must beat input on at least 70% of images");
    });

    h.run(10, "ablation ordering matches the expected direction", [&] {
        expect(!report.rows.empty(), "evaluation report missing");
        const VariantResult* no_affm = nullptr;
        const VariantResult* unguided = nullptr;
        const VariantResult* full = nullptr;
        for (const auto& m : report.means) {
            if (m.variant == "no-affm") no_affm = &m;
            if (m.variant == "unguided-affm") unguided = &m;
            if (m.variant == "full") full = &m;
        }
        expect(no_affm && unguided && full, "missing ablation variants");
        std::cerr << "  [mean psnr no-affm " << no_affm->psnr_db << ", unguided "
                  << unguided->psnr_db << ", full " << full->psnr_db << "]\n";
        std::cerr << "  [flare-free mae no-affm " << no_affm->flare_free_mae << ", unguided "
                  << unguided->flare_free_mae << ", full " << full->flare_free_mae << "]\n";
        expect(full->psnr_db >= unguided->psnr_db, "full must be >= unguided-affm in PSNR");
        expect(unguided->psnr_db > no_affm->psnr_db, "unguided-affm must beat no-affm in PSNR");
        expect(full->flare_free_mae <= unguided->flare_free_mae,
               "full must have the lowest flare-free-region error");
        expect(unguided->flare_free_mae <= no_affm->flare_free_mae,
               "unguided-affm must not exceed no-affm in flare-free-region error");
    });

    if (h.failures == 0) fs::remove_all(out_dir);
    std::printf("%s (%d criteria failed)\n", h.failures ? "ACCEPTANCE: FAIL" : "ACCEPTANCE: PASS",
                h.failures);
    return h.failures ? 1 : 0;
}
