#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mralign/runs.hpp"

using namespace mralign;

int main(int argc, char** argv) {
    CLI::App app{"hierarchical multi-resolution image-text alignment toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, ckpt, mode = "guided", axis;
    long long seed = -1;
    bool pe = true;

    auto* gen = app.add_subcommand("gen-data", "synthesize the slide corpus");
    gen->add_option("--config", config_path, "config file (key=value)");
    gen->add_option("--seed", seed, "dataset seed (overrides data.data_seed)");
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* train = app.add_subcommand("train", "train on a generated dataset");
    train->add_option("--config", config_path, "config file (key=value)");
    train->add_option("--seed", seed, "run seed (overrides train.seed)");
    train->add_option("--data", data_dir, "dataset directory from gen-data")->required();
    train->add_option("--out", out_dir, "output directory")->required();
    train->add_option("--checkpoint", ckpt, "resume training from this checkpoint");

    auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset");
    ev->add_option("--config", config_path, "config file (key=value)");
    ev->add_option("--seed", seed, "tile sampling seed (overrides train.seed)");
    ev->add_option("--data", data_dir, "dataset directory from gen-data")->required();
    ev->add_option("--checkpoint", ckpt, "checkpoint to score")->required();
    ev->add_option("--out", out_dir, "output directory")->required();
    ev->add_option("--mode", mode, "guided|classical")
        ->check(CLI::IsMember({"guided", "classical"}));
    ev->add_option("--pe", pe, "prompt ensembling on/off");

    auto* ab = app.add_subcommand("ablate", "run one ablation axis");
    ab->add_option("--config", config_path, "config file (key=value)");
    ab->add_option("--seed", seed, "run seed (overrides train.seed)");
    ab->add_option("--axis", axis, "loss|hierarchy|resolution|k_o")->required();
    ab->add_option("--out", out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help and friends
        std::cerr << "error: " << e.get_name() << ": " << e.what() << std::endl;
        return 1;
    }

    try {
        TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
        if (gen->parsed()) {
            if (seed >= 0) cfg.data.data_seed = static_cast<uint64_t>(seed);
            GenDataOutput r = cmd_gen_data(cfg, out_dir);
            std::cout << "wrote " << r.dir << ": " << r.n_slides << " slides, " << r.n_anchors
                      << " anchors" << std::endl;
        } else if (train->parsed()) {
            if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
            TrainOutput r = cmd_train(cfg, data_dir, out_dir, ckpt);
            std::cout << "trained " << r.steps << " steps, final loss " << r.final_total
                      << ", checkpoint " << r.checkpoint << std::endl;
        } else if (ev->parsed()) {
            if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
            EvalOutput r = cmd_eval(cfg, data_dir, ckpt, out_dir, mode == "guided", pe);
            std::cout << r.report;
        } else if (ab->parsed()) {
            if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
            AblateOutput r = cmd_ablate(cfg, axis, out_dir);
            std::cout << r.table;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
