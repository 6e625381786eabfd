#include "difflare/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "difflare/errors.hpp"

namespace difflare {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& section,
                const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in config section '" + section +
                              "'");
}

template <typename T>
void get(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_corpus(const json& j, CorpusConfig& c) {
    check_keys(j, "corpus",
               {"kind", "folder", "train_backgrounds", "test_backgrounds", "crop",
                "samples_per_background", "noflare_prob", "seed"});
    get(j, "kind", c.kind);
    get(j, "folder", c.folder);
    get(j, "train_backgrounds", c.train_backgrounds);
    get(j, "test_backgrounds", c.test_backgrounds);
    get(j, "crop", c.crop);
    get(j, "samples_per_background", c.samples_per_background);
    get(j, "noflare_prob", c.noflare_prob);
    get(j, "seed", c.seed);
}

void parse_vq(const json& j, VqConfig& c) {
    check_keys(j, "vq",
               {"width", "embed_dim", "codebook", "downsample", "lr", "steps", "batch",
                "commit_beta", "val_images", "target_psnr"});
    get(j, "width", c.width);
    get(j, "embed_dim", c.embed_dim);
    get(j, "codebook", c.codebook);
    get(j, "downsample", c.downsample);
    get(j, "lr", c.lr);
    get(j, "steps", c.steps);
    get(j, "batch", c.batch);
    get(j, "commit_beta", c.commit_beta);
    get(j, "val_images", c.val_images);
    get(j, "target_psnr", c.target_psnr);
}

void parse_diffusion(const json& j, DiffusionConfig& c) {
    check_keys(j, "diffusion",
               {"T", "beta_start", "beta_end", "schedule", "widths", "temb_dim", "cond_dim",
                "vocab", "latent_channels", "latent_size", "lr", "steps", "batch",
                "cond_dropout"});
    get(j, "T", c.T);
    get(j, "beta_start", c.beta_start);
    get(j, "beta_end", c.beta_end);
    get(j, "schedule", c.schedule);
    get(j, "widths", c.widths);
    get(j, "temb_dim", c.temb_dim);
    get(j, "cond_dim", c.cond_dim);
    get(j, "vocab", c.vocab);
    get(j, "latent_channels", c.latent_channels);
    get(j, "latent_size", c.latent_size);
    get(j, "lr", c.lr);
    get(j, "steps", c.steps);
    get(j, "batch", c.batch);
    get(j, "cond_dropout", c.cond_dropout);
}

void parse_sgim(const json& j, SgimConfig& c) {
    check_keys(j, "sgim", {"lr", "steps", "batch"});
    get(j, "lr", c.lr);
    get(j, "steps", c.steps);
    get(j, "batch", c.batch);
}

void parse_affm(const json& j, FusionConfig& c) {
    check_keys(j, "affm",
               {"m", "n", "attention_heads", "width", "lgp_guided", "additive_mask",
                "lambda_fidelity", "lgp_threshold", "lr", "steps", "batch", "cache_samples",
                "sample_guidance", "noflare_prob"});
    get(j, "m", c.m);
    get(j, "n", c.n);
    get(j, "attention_heads", c.attention_heads);
    get(j, "width", c.width);
    get(j, "lgp_guided", c.lgp_guided);
    get(j, "additive_mask", c.additive_mask);
    get(j, "lambda_fidelity", c.lambda_fidelity);
    get(j, "lgp_threshold", c.lgp_threshold);
    get(j, "lr", c.lr);
    get(j, "steps", c.steps);
    get(j, "batch", c.batch);
    get(j, "cache_samples", c.cache_samples);
    get(j, "sample_guidance", c.sample_guidance);
    get(j, "noflare_prob", c.noflare_prob);
}

void parse_infer(const json& j, InferConfig& c) {
    check_keys(j, "infer", {"guidance_scale", "token"});
    get(j, "guidance_scale", c.guidance_scale);
    get(j, "token", c.token);
}

void parse_eval(const json& j, EvalConfig& c) {
    check_keys(j, "eval", {"variants", "images", "guidance_scale", "panels"});
    get(j, "variants", c.variants);
    get(j, "images", c.images);
    get(j, "guidance_scale", c.guidance_scale);
    get(j, "panels", c.panels);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse failure: ") + e.what());
    }
    check_keys(j, "<root>",
               {"seed", "out_dir", "corpus", "vq", "diffusion", "sgim", "affm", "infer",
                "eval"});
    RunConfig c;
    get(j, "seed", c.seed);
    get(j, "out_dir", c.out_dir);
    if (j.contains("corpus")) parse_corpus(j["corpus"], c.corpus);
    if (j.contains("vq")) parse_vq(j["vq"], c.vq);
    if (j.contains("diffusion")) parse_diffusion(j["diffusion"], c.diffusion);
    if (j.contains("sgim")) parse_sgim(j["sgim"], c.sgim);
    if (j.contains("affm")) parse_affm(j["affm"], c.affm);
    if (j.contains("infer")) parse_infer(j["infer"], c.infer);
    if (j.contains("eval")) parse_eval(j["eval"], c.eval);
    return c;
}

RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return RunConfig{};
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["corpus"] = {{"kind", c.corpus.kind},
                   {"folder", c.corpus.folder},
                   {"train_backgrounds", c.corpus.train_backgrounds},
                   {"test_backgrounds", c.corpus.test_backgrounds},
                   {"crop", c.corpus.crop},
                   {"samples_per_background", c.corpus.samples_per_background},
                   {"noflare_prob", c.corpus.noflare_prob},
                   {"seed", c.corpus.seed}};
    j["vq"] = {{"width", c.vq.width},
               {"embed_dim", c.vq.embed_dim},
               {"codebook", c.vq.codebook},
               {"downsample", c.vq.downsample},
               {"lr", c.vq.lr},
               {"steps", c.vq.steps},
               {"batch", c.vq.batch},
               {"commit_beta", c.vq.commit_beta},
               {"val_images", c.vq.val_images},
               {"target_psnr", c.vq.target_psnr}};
    j["diffusion"] = {{"T", c.diffusion.T},
                      {"beta_start", c.diffusion.beta_start},
                      {"beta_end", c.diffusion.beta_end},
                      {"schedule", c.diffusion.schedule},
                      {"widths", c.diffusion.widths},
                      {"temb_dim", c.diffusion.temb_dim},
                      {"cond_dim", c.diffusion.cond_dim},
                      {"vocab", c.diffusion.vocab},
                      {"latent_channels", c.diffusion.latent_channels},
                      {"latent_size", c.diffusion.latent_size},
                      {"lr", c.diffusion.lr},
                      {"steps", c.diffusion.steps},
                      {"batch", c.diffusion.batch},
                      {"cond_dropout", c.diffusion.cond_dropout}};
    j["sgim"] = {{"lr", c.sgim.lr}, {"steps", c.sgim.steps}, {"batch", c.sgim.batch}};
    j["affm"] = {{"m", c.affm.m},
                 {"n", c.affm.n},
                 {"attention_heads", c.affm.attention_heads},
                 {"width", c.affm.width},
                 {"lgp_guided", c.affm.lgp_guided},
                 {"additive_mask", c.affm.additive_mask},
                 {"lambda_fidelity", c.affm.lambda_fidelity},
                 {"lgp_threshold", c.affm.lgp_threshold},
                 {"lr", c.affm.lr},
                 {"steps", c.affm.steps},
                 {"batch", c.affm.batch},
                 {"cache_samples", c.affm.cache_samples},
                 {"sample_guidance", c.affm.sample_guidance},
                 {"noflare_prob", c.affm.noflare_prob}};
    j["infer"] = {{"guidance_scale", c.infer.guidance_scale}, {"token", c.infer.token}};
    j["eval"] = {{"variants", c.eval.variants},
                 {"images", c.eval.images},
                 {"guidance_scale", c.eval.guidance_scale},
                 {"panels", c.eval.panels}};
    return j.dump(2);
}

}  // namespace difflare
