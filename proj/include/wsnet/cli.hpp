#pragma once

#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "wsnet/harness.hpp"

// Subcommand front-end over the harness. Factored out of main() so tests can
// drive the exact CLI paths in-process.

namespace wsnet::cli {

namespace cli_detail {

inline void attach_model_opts(CLI::App* cmd, WsNetConfig& model) {
    cmd->add_option("--feat-dim", model.feat_dim, "token channels D");
    cmd->add_option("--stages", model.stages, "WFFE stages");
    cmd->add_option("--d-k", model.d_k, "attention head dim");
    cmd->add_option("--ssm-state", model.ssm_state, "SSM states per channel");
    cmd->add_option("--tau-sa", model.tau_sa, "standard attention temperature");
    cmd->add_option("--tau-inv", model.tau_inv, "inverse attention temperature");
    cmd->add_option("--lr", model.lr, "learning rate");
    cmd->add_option("--iters", model.iters, "training iterations");
    cmd->add_option("--alpha-l", model.weights.alpha, "RMSE loss weight");
    cmd->add_option("--beta-l", model.weights.beta, "SAD loss weight");
    cmd->add_option("--gamma-l", model.weights.gamma, "KL loss weight");
    cmd->add_flag("--no-mamba{false}", model.enable_mamba, "disable the SSM branch");
    cmd->add_flag("--no-attention{false}", model.enable_attention,
                  "disable the standard attention branch");
    cmd->add_flag("--no-wsa{false}", model.enable_wsa, "disable inverse-attention gating");
}

inline std::vector<std::optional<double>> parse_snr_tokens(const std::vector<std::string>& toks) {
    std::vector<std::optional<double>> out;
    for (const auto& t : toks) {
        if (t == "none")
            out.push_back(std::nullopt);
        else
            out.push_back(std::stod(t));
    }
    return out;
}

}  // namespace cli_detail

inline int run(std::vector<std::string> args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
    CLI::App app{"WS-Net hyperspectral unmixing toolkit"};
    app.require_subcommand(1);

    // ---- synth ----
    std::string synth_library, synth_out;
    SceneSpec synth_spec;
    std::uint64_t synth_seed = 0;
    auto* synth = app.add_subcommand("synth", "generate a blocked synthetic scene");
    synth->add_option("--library", synth_library, "spectral library CSV")->required();
    synth->add_option("--out", synth_out, "output cube path (.hsc)")->required();
    synth->add_option("--grid", synth_spec.grid, "blocks per side");
    synth->add_option("--block-px", synth_spec.block_px, "pixels per block side");
    synth->add_option("--bands", synth_spec.bands, "spectral bands");
    synth->add_option("--lambda-min", synth_spec.lambda_min, "first wavelength (nm)");
    synth->add_option("--lambda-max", synth_spec.lambda_max, "last wavelength (nm)");
    synth->add_option("--materials-per-block", synth_spec.materials_per_block,
                      "endmembers mixed per block");
    synth->add_option("--seed", synth_seed, "random seed")->required();

    // ---- vca ----
    std::string vca_cube, vca_out;
    size_t vca_r = 0;
    std::uint64_t vca_seed = 0;
    auto* vca_cmd = app.add_subcommand("vca", "extract endmembers with VCA");
    vca_cmd->add_option("--cube", vca_cube, "input cube (.hsc)")->required();
    vca_cmd->add_option("--out", vca_out, "output endmember CSV")->required();
    vca_cmd->add_option("-R,--endmembers", vca_r, "endmember count")->required();
    vca_cmd->add_option("--seed", vca_seed, "random seed")->required();

    // ---- fclsu ----
    std::string fclsu_cube, fclsu_em, fclsu_out;
    auto* fclsu_cmd = app.add_subcommand("fclsu", "fully constrained least squares abundances");
    fclsu_cmd->add_option("--cube", fclsu_cube, "input cube (.hsc)")->required();
    fclsu_cmd->add_option("--endmembers", fclsu_em, "endmember CSV")->required();
    fclsu_cmd->add_option("--out", fclsu_out, "output abundances (.hsc, bands=P)")->required();

    // ---- train ----
    WsNetConfig train_model;
    std::string train_cube_path, train_out_dir;
    size_t train_r = 0;
    std::uint64_t train_seed = 0;
    auto* train_cmd = app.add_subcommand("train", "train WS-Net on a cube");
    train_cmd->add_option("--cube", train_cube_path, "input cube (.hsc)")->required();
    train_cmd->add_option("-R,--endmembers", train_r, "endmember count")->required();
    train_cmd->add_option("--out-dir", train_out_dir, "output directory")->required();
    train_cmd->add_option("--seed", train_seed, "random seed")->required();
    cli_detail::attach_model_opts(train_cmd, train_model);

    // ---- eval ----
    std::string ev_true_a, ev_est_a, ev_true_e, ev_est_e;
    auto* eval_cmd = app.add_subcommand("eval", "aligned RMSE/SAD metrics");
    eval_cmd->add_option("--true-abundance", ev_true_a, "truth abundances (.hsc)")->required();
    eval_cmd->add_option("--est-abundance", ev_est_a, "estimated abundances (.hsc)")->required();
    eval_cmd->add_option("--true-endmembers", ev_true_e, "truth endmember CSV")->required();
    eval_cmd->add_option("--est-endmembers", ev_est_e, "estimated endmember CSV")->required();

    // ---- snr-sweep / compare ----
    ExperimentConfig exp_cfg;
    std::string exp_config_path;
    std::vector<std::string> exp_snr;
    auto add_experiment = [&](const char* name, const char* desc) {
        auto* cmd = app.add_subcommand(name, desc);
        cmd->add_option("--config", exp_config_path, "flat key=value config file");
        cmd->add_option("--library", exp_cfg.library_path, "spectral library CSV (synth scene)");
        cmd->add_option("--cube", exp_cfg.cube_path, "observed cube (.hsc)");
        cmd->add_option("--truth-abundance", exp_cfg.truth_abundance_path,
                        "truth abundances (.hsc)");
        cmd->add_option("--truth-endmembers", exp_cfg.truth_endmembers_path,
                        "truth endmember CSV");
        cmd->add_option("--grid", exp_cfg.scene.grid, "blocks per side");
        cmd->add_option("--block-px", exp_cfg.scene.block_px, "pixels per block side");
        cmd->add_option("--bands", exp_cfg.scene.bands, "spectral bands");
        cmd->add_option("--materials-per-block", exp_cfg.scene.materials_per_block,
                        "endmembers mixed per block");
        cmd->add_option("--snr", exp_snr, "SNR levels in dB, or 'none'");
        cmd->add_option("--methods", exp_cfg.methods, "methods: fclsu wsnet");
        cmd->add_flag("--use-true-endmembers", exp_cfg.use_true_endmembers,
                      "pair FCLSU with truth endmembers instead of VCA");
        cmd->add_option("--out-dir", exp_cfg.out_dir, "output directory");
        cmd->add_option("--seed", exp_cfg.seed, "random seed");
        cli_detail::attach_model_opts(cmd, exp_cfg.model);
        return cmd;
    };
    auto* sweep_cmd = add_experiment("snr-sweep", "run methods across SNR levels");
    auto* cmp_cmd = add_experiment("compare", "single-scene method comparison");

    std::vector<const char*> argv;
    argv.push_back("wsnet");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (synth->parsed()) {
            auto library = load_spectral_library(synth_library);
            synth_spec.seed = synth_seed;
            auto scene = generate_blocked_scene(library, synth_spec);
            write_cube(scene.cube, synth_out);
            write_endmembers_csv(scene.endmembers, synth_out + ".endmembers.csv",
                                 scene.material_names);
            write_abundance_hsc(scene.abundances, synth_out + ".abundance.hsc");
            out << "wrote " << synth_out << " (" << scene.cube.bands << "x" << scene.cube.height
                << "x" << scene.cube.width << ") with truth sidecars\n";
        } else if (vca_cmd->parsed()) {
            auto cube = read_cube(vca_cube);
            auto e = vca(cube, vca_r, vca_seed);
            write_endmembers_csv(e, vca_out);
            out << "wrote " << vca_out << "\n";
        } else if (fclsu_cmd->parsed()) {
            auto cube = read_cube(fclsu_cube);
            auto em = read_endmembers_csv(fclsu_em);
            auto a = fclsu(cube, em.matrix);
            write_abundance_hsc(a, fclsu_out);
            out << "wrote " << fclsu_out << "\n";
        } else if (train_cmd->parsed()) {
            auto cube = read_cube(train_cube_path);
            train_model.endmembers = train_r;
            train_model.seed = train_seed;
            TrainResult tr = train(cube, train_model);
            std::filesystem::create_directories(train_out_dir);
            {
                ad::NoGradGuard ng;
                auto feats = build_wffe_features(cube, train_model);
                auto fwd = wsnet_forward(feats, tr.params, train_model, false);
                auto a = abundances_from_tensor(fwd.decoded.abundances, cube.height, cube.width);
                write_abundance_hsc(a, train_out_dir + "/abundance.hsc");
                write_abundance_outputs(a, train_out_dir);
            }
            write_endmembers_csv(endmembers_from_tensor(tr.params.endmembers),
                                 train_out_dir + "/endmembers.csv");
            std::string hist = "iteration,total_loss\n";
            for (size_t i = 0; i < tr.loss_history.size(); ++i)
                hist += std::to_string(i) + "," + wsnet::detail::fmt(tr.loss_history[i]) + "\n";
            wsnet::detail::atomic_write(train_out_dir + "/loss_history.csv", hist);
            out << "trained " << tr.loss_history.size() << " iterations";
            if (!tr.loss_history.empty())
                out << ", loss " << tr.loss_history.front() << " -> " << tr.loss_history.back();
            out << "; outputs in " << train_out_dir << "\n";
        } else if (eval_cmd->parsed()) {
            GroundTruth gt;
            gt.abundances = read_abundance_hsc(ev_true_a);
            auto tn = read_endmembers_csv(ev_true_e);
            gt.endmembers = std::move(tn.matrix);
            gt.names = std::move(tn.names);
            gt.weak = classify_weak_endmembers(gt.endmembers, gt.abundances);
            MethodEstimate est;
            est.abundances = read_abundance_hsc(ev_est_a);
            est.endmembers = read_endmembers_csv(ev_est_e).matrix;
            MetricsRow row = evaluate_estimate(gt, est);
            out << "endmember,rmse,sad\n";
            for (size_t r = 0; r < row.rmse.size(); ++r)
                out << gt.names[r] << "," << wsnet::detail::fmt(row.rmse[r]) << ","
                    << wsnet::detail::fmt(row.sad[r]) << "\n";
            out << "mean," << wsnet::detail::fmt(row.rmse_mean) << ","
                << wsnet::detail::fmt(row.sad_mean) << "\n";
            if (!gt.weak.empty())
                out << "weak," << wsnet::detail::fmt(row.rmse_weak) << ","
                    << wsnet::detail::fmt(row.sad_weak) << "\n";
        } else if (sweep_cmd->parsed() || cmp_cmd->parsed()) {
            CLI::App* cmd = sweep_cmd->parsed() ? sweep_cmd : cmp_cmd;
            ExperimentConfig cfg;
            if (!exp_config_path.empty()) {
                cfg = experiment_from_kv(parse_config_file(exp_config_path));
                // explicit command-line options override the file
                if (cmd->count("--library")) cfg.library_path = exp_cfg.library_path;
                if (cmd->count("--cube")) cfg.cube_path = exp_cfg.cube_path;
                if (cmd->count("--methods")) cfg.methods = exp_cfg.methods;
                if (cmd->count("--snr")) cfg.snr_list = cli_detail::parse_snr_tokens(exp_snr);
                if (cmd->count("--out-dir")) cfg.out_dir = exp_cfg.out_dir;
                if (cmd->count("--seed")) {
                    cfg.seed = exp_cfg.seed;
                    cfg.model.seed = exp_cfg.seed;
                    cfg.scene.seed = exp_cfg.seed;
                }
                if (cmd->count("--iters")) cfg.model.iters = exp_cfg.model.iters;
                if (cmd->count("--lr")) cfg.model.lr = exp_cfg.model.lr;
            } else {
                cfg = exp_cfg;
                if (!exp_snr.empty()) cfg.snr_list = cli_detail::parse_snr_tokens(exp_snr);
                if (cfg.snr_list.empty()) cfg.snr_list = {std::nullopt};
                if (cfg.methods.empty()) cfg.methods = {"fclsu"};
                cfg.synth_scene = cfg.cube_path.empty();
                cfg.model.seed = cfg.seed;
                cfg.scene.seed = cfg.seed;
            }
            const std::string path =
                sweep_cmd->parsed() ? run_snr_sweep(cfg) : run_compare(cfg);
            out << "wrote " << path << "\n";
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace wsnet::cli
