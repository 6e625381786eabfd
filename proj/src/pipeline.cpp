#include "difflare/pipeline.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "difflare/checkpoint.hpp"
#include "difflare/errors.hpp"
#include "difflare/lgp.hpp"
#include "difflare/rng.hpp"

namespace difflare {

namespace fs = std::filesystem;
using nlohmann::json;

std::string file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for hashing");
    std::stringstream ss;
    ss << f.rdbuf();
    std::string bytes = ss.str();
    return hash_hex(fnv1a64(bytes.data(), bytes.size()));
}

namespace {

double elapsed(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string dir_hash(const std::string& dir) {
    // manifest.jsonl summarizes the corpus contents; hash that
    std::string m = dir + "/manifest.jsonl";
    if (fs::exists(m)) return file_hash(m);
    return "0";
}

}  // namespace

Pipeline::Pipeline(const RunConfig& cfg) : cfg_(cfg) {
    if (cfg_.out_dir.empty()) throw ConfigError("out_dir must not be empty");
    fs::create_directories(cfg_.out_dir);
    if (cfg_.corpus.kind == "folder" && cfg_.corpus.folder.empty())
        cfg_.corpus.folder = artifact("corpus");
}

std::string Pipeline::artifact(const std::string& name) const {
    return cfg_.out_dir + "/" + name;
}

void Pipeline::require(const std::string& name, const std::string& producer_stage) const {
    if (!fs::exists(artifact(name)))
        throw DependencyError("missing artifact '" + name + "'; run \"" + producer_stage +
                              "\" first");
}

void Pipeline::record_stage(const std::string& stage, const std::vector<std::string>& inputs,
                            const std::vector<std::string>& outputs,
                            double wall_seconds) const {
    std::string mpath = artifact("manifest.json");
    json m = json::object();
    if (fs::exists(mpath)) {
        std::ifstream f(mpath);
        f >> m;
    }
    json entry;
    entry["seed"] = cfg_.seed;
    entry["wall_seconds"] = wall_seconds;
    entry["inputs"] = json::object();
    entry["outputs"] = json::object();
    for (const auto& n : inputs)
        entry["inputs"][n] = fs::is_directory(artifact(n)) ? dir_hash(artifact(n))
                                                           : file_hash(artifact(n));
    for (const auto& n : outputs)
        entry["outputs"][n] = fs::is_directory(artifact(n)) ? dir_hash(artifact(n))
                                                            : file_hash(artifact(n));
    m["stages"][stage] = entry;
    std::ofstream f(mpath);
    f << m.dump(2) << "\n";

    std::ofstream c(artifact("config." + stage + ".json"));
    c << dump_run_config(cfg_) << "\n";
}

bool Pipeline::manifest_valid(std::string* why) const {
    std::string mpath = artifact("manifest.json");
    if (!fs::exists(mpath)) {
        if (why) *why = "no manifest";
        return false;
    }
    json m;
    {
        std::ifstream f(mpath);
        f >> m;
    }
    if (!m.contains("stages")) {
        if (why) *why = "manifest has no stages";
        return false;
    }
    for (auto& [stage, entry] : m["stages"].items()) {
        for (auto& [name, hash] : entry["inputs"].items()) {
            std::string path = artifact(name);
            if (!fs::exists(path)) {
                if (why) *why = stage + ": input '" + name + "' missing";
                return false;
            }
            std::string cur = fs::is_directory(path) ? dir_hash(path) : file_hash(path);
            if (cur != hash.get<std::string>()) {
                if (why) *why = stage + ": input '" + name + "' changed since the stage ran";
                return false;
            }
        }
        // a stage whose outputs were deleted is merely incomplete, not invalid
        for (auto& [name, hash] : entry["outputs"].items()) {
            std::string path = artifact(name);
            if (!fs::exists(path)) continue;
            std::string cur = fs::is_directory(path) ? dir_hash(path) : file_hash(path);
            if (cur != hash.get<std::string>()) {
                if (why) *why = stage + ": output '" + name + "' changed since the stage ran";
                return false;
            }
        }
    }
    return true;
}

void Pipeline::run_stage(const std::string& stage, std::ostream* log) {
    auto t0 = std::chrono::steady_clock::now();

    if (stage == "synth") {
        write_corpus(cfg_.corpus, artifact("corpus"));
        record_stage(stage, {}, {"corpus"}, elapsed(t0));
        return;
    }

    const bool folder_backed = cfg_.corpus.kind == "folder";
    std::vector<std::string> corpus_input;
    if (folder_backed) {
        if (!fs::exists(cfg_.corpus.folder))
            throw DependencyError("missing artifact 'corpus'; run \"synth\" first");
        if (cfg_.corpus.folder == artifact("corpus")) corpus_input.push_back("corpus");
    }

    if (stage == "train-vq") {
        DatasetStream train(cfg_.corpus, Split::train), test(cfg_.corpus, Split::test);
        VqModel vq(cfg_.vq, cfg_.seed);
        TrainStats st = pretrain_vq(vq, train, test, cfg_.seed, log);
        json extra = {{"initial_loss", st.initial}, {"final_loss", st.final_loss}};
        vq.save(artifact("vq.ckpt"), extra.dump());
        record_stage(stage, corpus_input, {"vq.ckpt"}, elapsed(t0));
        return;
    }

    if (stage == "train-diffusion") {
        require("vq.ckpt", "train-vq");
        VqModel vq = VqModel::load(artifact("vq.ckpt"));
        DatasetStream train(cfg_.corpus, Split::train), test(cfg_.corpus, Split::test);
        std::vector<LatentTensor> zt, zv;
        for (int i = 0; i < train.size(); ++i) zt.push_back(vq.encode(train.sample(i).gt));
        int nval = std::min(8, test.size());
        for (int i = 0; i < nval; ++i) zv.push_back(vq.encode(test.sample(i).gt));
        DenoiserModel den(cfg_.diffusion, cfg_.seed);
        TrainStats st = pretrain_diffusion(den, zt, zv, cfg_.seed, log);
        json extra = {{"initial_loss", st.initial}, {"final_loss", st.final_loss}};
        den.save(artifact("diffusion.ckpt"), extra.dump());
        std::vector<std::string> ins = corpus_input;
        ins.push_back("vq.ckpt");
        record_stage(stage, ins, {"diffusion.ckpt"}, elapsed(t0));
        return;
    }

    if (stage == "train-sgim") {
        require("diffusion.ckpt", "train-diffusion");
        require("vq.ckpt", "train-vq");
        VqModel vq = VqModel::load(artifact("vq.ckpt"));
        DenoiserModel den = DenoiserModel::load(artifact("diffusion.ckpt"));
        DatasetStream train(cfg_.corpus, Split::train), test(cfg_.corpus, Split::test);
        SgimModel sgim(den.cfg(), cfg_.seed);
        TrainStats st = train_sgim(sgim, den, vq, train, test, cfg_.sgim, cfg_.seed, log);
        json extra = {{"initial_loss", st.initial}, {"final_loss", st.final_loss}};
        sgim.save(artifact("sgim.ckpt"), extra.dump());
        std::vector<std::string> ins = corpus_input;
        ins.push_back("vq.ckpt");
        ins.push_back("diffusion.ckpt");
        record_stage(stage, ins, {"sgim.ckpt"}, elapsed(t0));
        return;
    }

    if (stage == "train-affm") {
        require("sgim.ckpt", "train-sgim");
        require("diffusion.ckpt", "train-diffusion");
        require("vq.ckpt", "train-vq");
        VqModel vq = VqModel::load(artifact("vq.ckpt"));
        DenoiserModel den = DenoiserModel::load(artifact("diffusion.ckpt"));
        SgimModel sgim = SgimModel::load(artifact("sgim.ckpt"));

        CorpusConfig ccfg = cfg_.corpus;
        ccfg.noflare_prob = cfg_.affm.noflare_prob;  // mix in degenerate samples
        DatasetStream train(ccfg, Split::train), test(ccfg, Split::test);

        int image_size = cfg_.corpus.crop;
        int latent_size = image_size / vq.cfg().downsample;
        AffmModel guided(cfg_.affm, vq.tap_channels(), latent_size, image_size, cfg_.seed);
        FusionConfig ucfg = cfg_.affm;
        ucfg.lgp_guided = false;  // ablates the mask; the loss keeps its fidelity term
        // same init seed: shared layers start identical, so the ablation is paired
        AffmModel unguided(ucfg, vq.tap_channels(), latent_size, image_size, cfg_.seed);

        TrainStats st =
            train_affm(guided, unguided, vq, den, sgim, train, test, cfg_.affm, cfg_.seed, log);
        json extra = {{"initial_loss", st.initial}, {"final_loss", st.final_loss}};
        guided.save(artifact("affm.ckpt"), extra.dump());
        unguided.save(artifact("affm_unguided.ckpt"), extra.dump());
        std::vector<std::string> ins = corpus_input;
        ins.push_back("vq.ckpt");
        ins.push_back("diffusion.ckpt");
        ins.push_back("sgim.ckpt");
        record_stage(stage, ins, {"affm.ckpt", "affm_unguided.ckpt"}, elapsed(t0));
        return;
    }

    throw ConfigError("unknown stage '" + stage + "'");
}

ModelBundle Pipeline::load_models() const {
    require("vq.ckpt", "train-vq");
    require("diffusion.ckpt", "train-diffusion");
    require("sgim.ckpt", "train-sgim");
    require("affm.ckpt", "train-affm");
    require("affm_unguided.ckpt", "train-affm");
    ModelBundle b;
    b.vq = std::make_unique<VqModel>(VqModel::load(artifact("vq.ckpt")));
    b.denoiser = std::make_unique<DenoiserModel>(DenoiserModel::load(artifact("diffusion.ckpt")));
    b.sgim = std::make_unique<SgimModel>(SgimModel::load(artifact("sgim.ckpt")));
    b.affm = std::make_unique<AffmModel>(AffmModel::load(artifact("affm.ckpt")));
    b.affm_unguided =
        std::make_unique<AffmModel>(AffmModel::load(artifact("affm_unguided.ckpt")));
    const DiffusionConfig& d = b.denoiser->cfg();
    b.ns = build_schedule(d.T, d.beta_start, d.beta_end, d.schedule);
    return b;
}

ImageRGB Pipeline::restore(const ModelBundle& b, const ImageRGB& x_in, double guidance_scale,
                           uint64_t seed) const {
    int expect = b.denoiser->cfg().latent_size * b.vq->cfg().downsample;
    if (x_in.h != expect || x_in.w != expect)
        throw ConfigError("input must be " + std::to_string(expect) + "x" +
                          std::to_string(expect) + " for the configured latent size");
    LatentTensor z_in = b.vq->encode(x_in);
    SpadeHooks hooks = b.sgim->hooks(b.sgim->extract_guidance(z_in));
    LatentTensor z_r = sample(*b.denoiser, b.ns, &hooks, Condition::of(cfg_.infer.token),
                              guidance_scale, seed);
    ag::Tensor enc = b.vq->encoder_tap(x_in);
    ag::Tensor dec = b.vq->decoder_tap(z_r);
    LuminanceMask lm = luminance_mask(x_in, cfg_.affm.lgp_threshold);
    AttentionMask am = to_attention_mask(lm, z_in.h, z_in.w);
    return b.affm->fuse(enc, dec, x_in, &am);
}

void Pipeline::infer_file(const std::string& in_png, const std::string& out_png,
                          std::ostream* log) const {
    ModelBundle b = load_models();
    ImageRGB x = read_png(in_png);
    ImageRGB y = restore(b, x, cfg_.infer.guidance_scale, cfg_.seed);
    write_png(out_png, y);
    if (log) (*log) << "wrote " << out_png << "\n";
}

namespace {

double flare_free_mae(const ImageRGB& out, const ImageRGB& gt, const LuminanceMask& lm) {
    double s = 0;
    long n = 0;
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            if (!lm.at(y, x)) continue;
            for (int c = 0; c < 3; ++c) s += std::abs(out.at(y, x, c) - gt.at(y, x, c));
            n += 3;
        }
    return n ? s / n : 0.0;
}

ImageRGB hconcat(const std::vector<ImageRGB>& imgs) {
    int h = imgs[0].h, w = 0;
    for (auto& im : imgs) w += im.w + 2;
    ImageRGB out(h, w - 2);
    int x0 = 0;
    for (auto& im : imgs) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < im.w; ++x)
                for (int c = 0; c < 3; ++c) out.at(y, x0 + x, c) = im.at(y, x, c);
        x0 += im.w + 2;
    }
    return out;
}

}  // namespace

EvalReport Pipeline::evaluate(std::ostream* log) const {
    auto t0 = std::chrono::steady_clock::now();
    static const std::set<std::string> known{"input", "no-affm", "unguided-affm", "full"};
    for (const auto& v : cfg_.eval.variants)
        if (!known.count(v)) throw ConfigError("unknown eval variant '" + v + "'");

    ModelBundle b = load_models();
    DatasetStream test(cfg_.corpus, Split::test);
    int n = std::min(cfg_.eval.images, test.size());
    if (n <= 0) throw CorpusError("evaluate: empty test set");

    EvalReport rep;
    fs::create_directories(artifact("eval"));
    for (int i = 0; i < n; ++i) {
        FlareSample s = test.sample(i);
        RestorationRecord r = make_record(s, *b.vq, *b.denoiser, *b.sgim, b.ns,
                                          cfg_.eval.guidance_scale, cfg_.affm.lgp_threshold,
                                          Rng::key(cfg_.seed, "eval.sample", i));
        EvalRow row;
        row.index = i;
        std::vector<ImageRGB> panel{s.input};
        for (const auto& vname : cfg_.eval.variants) {
            ImageRGB out;
            if (vname == "input")
                out = s.input;
            else if (vname == "no-affm")
                out = b.vq->decode(r.z_restored);
            else if (vname == "unguided-affm")
                out = b.affm_unguided->fuse(r.enc_tap, r.dec_tap, s.input, nullptr);
            else
                out = b.affm->fuse(r.enc_tap, r.dec_tap, s.input, &r.lm);
            VariantResult vr;
            vr.variant = vname;
            MetricReport m = metrics(out, s.gt);
            vr.psnr_db = m.psnr_db;
            vr.ssim = m.ssim;
            vr.flare_free_mae = flare_free_mae(out, s.gt, r.pixel_mask);
            row.variants.push_back(vr);
            if (vname != "input") panel.push_back(out);
        }
        panel.push_back(s.gt);
        if (cfg_.eval.panels)
            write_png(artifact("eval/panel_" + std::to_string(i) + ".png"), hconcat(panel));
        rep.rows.push_back(row);
        if (log) (*log) << "eval image " << i << "/" << n << "\n";
    }

    for (size_t vi = 0; vi < cfg_.eval.variants.size(); ++vi) {
        VariantResult m;
        m.variant = cfg_.eval.variants[vi];
        for (const auto& row : rep.rows) {
            m.psnr_db += row.variants[vi].psnr_db;
            m.ssim += row.variants[vi].ssim;
            m.flare_free_mae += row.variants[vi].flare_free_mae;
        }
        m.psnr_db /= rep.rows.size();
        m.ssim /= rep.rows.size();
        m.flare_free_mae /= rep.rows.size();
        rep.means.push_back(m);
    }
    rep.wall_seconds = elapsed(t0);
    return rep;
}

std::string EvalReport::to_json() const {
    json j;
    j["per_image"] = json::array();
    for (const auto& row : rows) {
        json r = {{"index", row.index}, {"variants", json::object()}};
        for (const auto& v : row.variants)
            r["variants"][v.variant] = {{"psnr_db", v.psnr_db},
                                        {"ssim", v.ssim},
                                        {"flare_free_mae", v.flare_free_mae}};
        j["per_image"].push_back(r);
    }
    j["means"] = json::object();
    for (const auto& v : means)
        j["means"][v.variant] = {{"psnr_db", v.psnr_db},
                                 {"ssim", v.ssim},
                                 {"flare_free_mae", v.flare_free_mae}};
    j["wall_seconds"] = wall_seconds;
    return j.dump(2);
}

void Pipeline::write_eval_artifacts(const EvalReport& r) const {
    fs::create_directories(artifact("eval"));
    std::ofstream f(artifact("eval/report.json"));
    f << r.to_json() << "\n";
    std::ofstream c(artifact("config.eval.json"));
    c << dump_run_config(cfg_) << "\n";
}

}  // namespace difflare
