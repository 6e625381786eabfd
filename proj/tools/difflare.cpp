#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "difflare/errors.hpp"
#include "difflare/pipeline.hpp"

using namespace difflare;

int main(int argc, char** argv) {
    CLI::App app{"difflare: staged lens-flare-removal pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_dir, in_png, out_png;
    uint64_t seed = 0;
    bool seed_set = false, out_set = false;

    auto add_shared = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "config file (JSON, per-stage sections)");
        sub->add_option("--seed", seed, "global seed override")
            ->each([&](const std::string&) { seed_set = true; });
        sub->add_option("--out", out_dir, "artifact directory override")
            ->each([&](const std::string&) { out_set = true; });
    };

    const char* stages[] = {"synth", "train-vq", "train-diffusion", "train-sgim", "train-affm"};
    for (const char* s : stages) add_shared(app.add_subcommand(s));
    CLI::App* inf = app.add_subcommand("infer");
    add_shared(inf);
    inf->add_option("--input", in_png, "input PNG")->required();
    inf->add_option("--output", out_png, "output PNG")->required();
    add_shared(app.add_subcommand("eval"));

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = load_run_config(config_path);
        bool cfg_has_out = false;
        if (!config_path.empty()) {
            std::ifstream f(config_path);
            std::stringstream ss;
            ss << f.rdbuf();
            auto j = nlohmann::json::parse(ss.str());
            cfg_has_out = j.contains("out_dir");
        }
        if (out_set)
            cfg.out_dir = out_dir;
        else if (!cfg_has_out) {
            if (const char* home = std::getenv("DIFFLARE_HOME")) cfg.out_dir = home;
        }
        if (seed_set) cfg.seed = seed;

        Pipeline p(cfg);
        std::string cmd = app.get_subcommands()[0]->get_name();
        if (cmd == "infer") {
            p.infer_file(in_png, out_png, &std::cout);
        } else if (cmd == "eval") {
            EvalReport r = p.evaluate(&std::cout);
            p.write_eval_artifacts(r);
            std::cout << r.to_json() << "\n";
        } else {
            p.run_stage(cmd, &std::cout);
            std::cout << cmd << ": done\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
