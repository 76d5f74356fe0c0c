// percdiff: desk-scale driver for the three diffusion-for-perception
// inference paradigms over synthetic scenes. Subcommands cover dataset
// generation, training, inference, evaluation, the beta sweep and the
// paradigm comparison; see the README for the output layout.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "percdiff/pipeline.hpp"

namespace {

using pd::RunConfig;

// Exit codes are fixed for scripting: 0 ok, 2 usage/config, 3 I/O,
// 4 training divergence, 5 non-finite inference, 6 eval degeneracy.
int guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const pd::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const pd::TrainingDivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 4;
    } catch (const pd::NonFiniteSampleError& e) {
        std::cerr << "inference produced non-finite values: " << e.what() << "\n";
        return 5;
    } catch (const pd::IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

// Flags override config-file values; only flags the user actually passed are
// applied on top of the loaded file.
struct FlagSet {
    CLI::App* cmd;
    std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> ops;
    std::shared_ptr<std::string> config_path = std::make_shared<std::string>();

    explicit FlagSet(CLI::App* c) : cmd(c) {
        cmd->add_option("--config", *config_path, "config file (section.key = value lines)");
    }

    template <class T>
    void opt(const std::string& name, T RunConfig::*field, const std::string& desc) {
        auto storage = std::make_shared<T>();
        CLI::Option* o = cmd->add_option(name, *storage, desc);
        ops.emplace_back(o, [storage, field](RunConfig& c) { c.*field = *storage; });
    }

    void flag(const std::string& name, bool RunConfig::*field, const std::string& desc) {
        auto storage = std::make_shared<bool>(false);
        CLI::Option* o = cmd->add_flag(name, *storage, desc);
        ops.emplace_back(o, [storage, field](RunConfig& c) { c.*field = *storage; });
    }

    template <class T>
    void named(const std::string& name, T RunConfig::*field, const std::string& desc,
               T (*parse)(const std::string&)) {
        auto storage = std::make_shared<std::string>();
        CLI::Option* o = cmd->add_option(name, *storage, desc);
        ops.emplace_back(o, [storage, field, parse](RunConfig& c) { c.*field = parse(*storage); });
    }

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_path->empty()) pd::load_config_file(cfg, *config_path);
        for (const auto& [o, apply] : ops)
            if (o->count() > 0) apply(cfg);
        return cfg;
    }
};

void add_common_flags(FlagSet& fs) {
    fs.opt("--out", &RunConfig::out_dir, "output directory");
    fs.opt("--seed", &RunConfig::seed, "base seed");
    fs.named("--schedule", &RunConfig::schedule_kind, "linear|scaled_linear|constant_one",
             +[](const std::string& s) { return pd::schedule_kind_from_string(s); });
    fs.opt("--T", &RunConfig::total_steps, "schedule length T");
    fs.opt("--beta-start", &RunConfig::beta_start, "schedule start beta");
    fs.opt("--beta-end", &RunConfig::beta_end, "schedule end beta");
    fs.named("--paradigm", &RunConfig::paradigm, "stochastic_ms|deterministic_ms|one_step",
             +[](const std::string& s) { return pd::paradigm_from_string(s); });
    fs.named("--task", &RunConfig::task, "depth|normal|mask",
             +[](const std::string& s) { return pd::task_from_string(s); });
    fs.named("--codec", &RunConfig::codec, "pca|identity",
             +[](const std::string& s) { return pd::codec_choice_from_string(s); });
    fs.opt("--patch", &RunConfig::patch, "codec patch size p");
    fs.opt("--latent-c", &RunConfig::latent_channels, "codec latent channels c");
    fs.named("--denoiser", &RunConfig::denoiser, "oracle|linear|mlp",
             +[](const std::string& s) { return pd::denoiser_kind_from_string(s); });
    fs.opt("--buckets", &RunConfig::buckets, "linear denoiser timestep buckets");
    fs.opt("--lambda", &RunConfig::ridge_lambda, "ridge regularization");
    fs.opt("--hidden", &RunConfig::hidden, "mlp hidden width");
    fs.opt("--epochs", &RunConfig::epochs, "training epochs");
    fs.opt("--batch", &RunConfig::batch_size, "batch size");
    fs.opt("--lr", &RunConfig::learning_rate, "initial learning rate (linear decay)");
    fs.opt("--momentum", &RunConfig::momentum, "sgd momentum");
    fs.opt("--draws", &RunConfig::linear_draws, "t/carrier draws per sample (linear fit)");
    fs.opt("--steps", &RunConfig::n_steps, "denoising steps per pass");
    fs.opt("--ensemble", &RunConfig::ensemble, "ensemble size m");
    fs.flag("--record-trajectory", &RunConfig::record_trajectory,
            "dump intermediate latents for the first image");
    fs.flag("--carrier-sign-flip", &RunConfig::carrier_sign_flip,
            "use the minus-sign carrier estimate (breaks exact inversion)");
}

int cmd_gen_data(const RunConfig& cfg) {
    const pd::DatasetManifest mf = pd::pipeline::run_gen_data(cfg);
    std::cout << "wrote " << mf.train_count << " train / " << mf.test_count
              << " test samples under " << cfg.out_dir << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    const pd::pipeline::TrainArtifacts art = pd::pipeline::run_train(cfg);
    std::cout << "trained " << pd::to_string(cfg.denoiser) << " denoiser ("
              << pd::to_string(cfg.paradigm) << "), final loss "
              << (art.loss_trace.empty() ? 0.0 : art.loss_trace.back()) << "\n";
    return 0;
}

int cmd_infer(const RunConfig& cfg) {
    const pd::pipeline::InferOutputs out = pd::pipeline::run_infer(cfg);
    long long evals = 0;
    for (long long e : out.evaluations) evals += e;
    std::cout << "wrote " << out.predictions.size() << " predictions, " << evals
              << " denoiser evaluations total\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    const pd::pipeline::EvalReport rep = pd::pipeline::run_eval(cfg);
    std::cout << "evaluated " << rep.rows.size() << " images, " << rep.flagged
              << " flagged degenerate\n";
    return rep.flagged > 0 ? 6 : 0;
}

int cmd_ablate_beta(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw pd::ConfigError("ablate-beta: --out is required");
    if (cfg.data_dir.empty()) throw pd::ConfigError("ablate-beta: --data is required");
    const pd::DatasetManifest mf = pd::load_manifest(cfg.data_dir);
    const std::vector<pd::Sample> train = pd::load_split(mf, "train");
    const std::vector<pd::Sample> test = pd::load_split(mf, "test");
    const auto rows = pd::pipeline::run_beta_sweep_rows(cfg, train, test);
    std::filesystem::create_directories(cfg.out_dir);
    pd::pipeline::write_sweep_csv(cfg.out_dir + "/ablate_betas.csv", rows, cfg.task);
    pd::write_effective_config(cfg, cfg.out_dir);

    // Metric ordering across schedules is reported, not asserted.
    std::vector<const pd::pipeline::SweepRow*> ok_rows;
    for (const auto& r : rows)
        if (r.ok) ok_rows.push_back(&r);
    std::sort(ok_rows.begin(), ok_rows.end(), [&](const auto* a, const auto* b) {
        return pd::pipeline::primary_metric(a->metrics, cfg.task) <
               pd::pipeline::primary_metric(b->metrics, cfg.task);
    });
    std::ofstream summary(cfg.out_dir + "/summary.txt");
    summary << "schedules ordered by " << pd::pipeline::primary_metric_name(cfg.task)
            << " (best first):\n";
    std::cout << "schedules ordered by " << pd::pipeline::primary_metric_name(cfg.task)
              << " (best first):\n";
    for (const auto* r : ok_rows) {
        const std::string line =
            "  " + r->label + "  " +
            pd::pipeline::fmt(pd::pipeline::primary_metric(r->metrics, cfg.task));
        summary << line << "\n";
        std::cout << line << "\n";
    }
    for (const auto& r : rows)
        if (!r.ok) {
            summary << "  " << r.label << "  failed: " << r.error << "\n";
            std::cout << "  " << r.label << "  failed: " << r.error << "\n";
        }
    return ok_rows.empty() ? 4 : 0;
}

int cmd_compare_paradigms(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw pd::ConfigError("compare-paradigms: --out is required");
    if (cfg.data_dir.empty()) throw pd::ConfigError("compare-paradigms: --data is required");
    const pd::DatasetManifest mf = pd::load_manifest(cfg.data_dir);
    const std::vector<pd::Sample> train = pd::load_split(mf, "train");
    const std::vector<pd::Sample> test = pd::load_split(mf, "test");
    std::vector<std::vector<pd::ImageTensor>> heatmaps;
    const auto rows = pd::pipeline::run_paradigm_comparison(cfg, train, test, &heatmaps);
    std::filesystem::create_directories(cfg.out_dir);
    pd::pipeline::write_paradigm_csv(cfg.out_dir + "/paradigms.csv", rows, cfg.task);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t i = 0; i < heatmaps[r].size(); ++i) {
            char name[96];
            std::snprintf(name, sizeof(name), "heatmap_%s_%04d.f32r", rows[r].label.c_str(),
                          static_cast<int>(i));
            pd::write_f32r(cfg.out_dir + "/" + name, heatmaps[r][i]);
        }
    }
    pd::write_effective_config(cfg, cfg.out_dir);
    int ok = 0;
    for (const auto& r : rows) {
        std::cout << r.label << ": "
                  << (r.ok ? "evaluations/image=" + std::to_string(r.evaluations_per_image)
                           : "failed: " + r.error)
                  << "\n";
        if (r.ok) ++ok;
    }
    return ok > 0 ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffusion-for-perception paradigms at desk scale"};
    app.require_subcommand(1);

    struct Sub {
        FlagSet flags;
        std::function<int(const RunConfig&)> run;
    };
    std::vector<std::unique_ptr<Sub>> subs;

    const auto add = [&](const char* name, const char* desc,
                         std::function<int(const RunConfig&)> run,
                         const std::function<void(FlagSet&)>& extra) -> CLI::App* {
        CLI::App* cmd = app.add_subcommand(name, desc);
        auto sub = std::make_unique<Sub>(Sub{FlagSet(cmd), std::move(run)});
        add_common_flags(sub->flags);
        extra(sub->flags);
        Sub* raw = sub.get();
        cmd->callback([raw]() {
            const int rc = guarded([&] { return raw->run(raw->flags.resolve()); });
            if (rc != 0) throw CLI::RuntimeError(rc);
        });
        subs.push_back(std::move(sub));
        return cmd;
    };

    add("gen-data", "render synthetic scenes and write a dataset", cmd_gen_data,
        [](FlagSet& fs) {
            fs.opt("--count", &RunConfig::count, "number of scenes");
            fs.opt("--res", &RunConfig::resolution, "image resolution");
            fs.opt("--train-frac", &RunConfig::train_frac, "train split fraction");
        });
    add("train", "fit codecs and train a denoiser", cmd_train, [](FlagSet& fs) {
        fs.opt("--data", &RunConfig::data_dir, "dataset directory (with manifest.txt)");
    });
    add("infer", "run inference over the test split", cmd_infer, [](FlagSet& fs) {
        fs.opt("--data", &RunConfig::data_dir, "dataset directory");
        fs.opt("--model", &RunConfig::model_dir, "trained model directory");
    });
    add("eval", "evaluate predictions against ground truth", cmd_eval, [](FlagSet& fs) {
        fs.opt("--data", &RunConfig::data_dir, "dataset directory");
        fs.opt("--pred", &RunConfig::pred_dir, "prediction directory");
    });
    add("ablate-beta", "deterministic multi-step sweep over schedule endpoints",
        cmd_ablate_beta, [](FlagSet& fs) {
            fs.opt("--data", &RunConfig::data_dir, "dataset directory");
        });
    add("compare-paradigms", "train and compare all inference paradigms",
        cmd_compare_paradigms, [](FlagSet& fs) {
            fs.opt("--data", &RunConfig::data_dir, "dataset directory");
        });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::RuntimeError& e) {
        return e.get_exit_code();
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return 2;
    }
    return 0;
}
