#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "percdiff/denoiser.hpp"
#include "percdiff/errors.hpp"
#include "percdiff/schedule.hpp"

namespace pd {

enum class TaskKind { depth, normal, mask };

inline const char* to_string(TaskKind t) {
    switch (t) {
        case TaskKind::depth: return "depth";
        case TaskKind::normal: return "normal";
        case TaskKind::mask: return "mask";
    }
    return "?";
}

inline TaskKind task_from_string(const std::string& s) {
    if (s == "depth") return TaskKind::depth;
    if (s == "normal") return TaskKind::normal;
    if (s == "mask") return TaskKind::mask;
    throw ConfigError("unknown task: " + s);
}

enum class CodecChoice { pca, identity };

inline const char* to_string(CodecChoice c) {
    return c == CodecChoice::pca ? "pca" : "identity";
}

inline CodecChoice codec_choice_from_string(const std::string& s) {
    if (s == "pca") return CodecChoice::pca;
    if (s == "identity") return CodecChoice::identity;
    throw ConfigError("unknown codec choice: " + s);
}

// Everything a command needs, merged from the config file and flag overrides.
// The file format is line-oriented `section.key = value` with '#' comments.
struct RunConfig {
    // schedule block
    ScheduleKind schedule_kind = ScheduleKind::scaled_linear;
    int total_steps = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;

    // codec block
    CodecChoice codec = CodecChoice::pca;
    int patch = 4;
    int latent_channels = 4;

    // denoiser block (TrainConfig fields included)
    DenoiserKind denoiser = DenoiserKind::linear;
    int buckets = 8;
    double ridge_lambda = 1e-6;
    int hidden = 64;
    int epochs = 200;
    int batch_size = 16;
    double learning_rate = 2e-3;
    double momentum = 0.9;
    int linear_draws = 4;

    Paradigm paradigm = Paradigm::one_step;
    TaskKind task = TaskKind::depth;

    // inference block
    int n_steps = 10;
    int ensemble = 1;
    std::uint64_t seed = 0;
    bool record_trajectory = false;
    bool carrier_sign_flip = false;

    // dataset block
    int count = 100;
    int resolution = 64;
    double train_frac = 0.8;

    std::string out_dir;
    std::string data_dir;
    std::string model_dir;
    std::string pred_dir;

    VarianceSchedule make_run_schedule() const {
        return make_schedule(schedule_kind, total_steps, beta_start, beta_end);
    }
    TrainConfig train_config() const {
        TrainConfig tc;
        tc.epochs = epochs;
        tc.batch_size = batch_size;
        tc.learning_rate = learning_rate;
        tc.momentum = momentum;
        tc.seed = seed;
        tc.paradigm = paradigm;
        tc.ridge_lambda = ridge_lambda;
        tc.buckets = buckets;
        tc.hidden = hidden;
        tc.linear_draws = linear_draws;
        return tc;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    try {
        if (key == "schedule.kind") cfg.schedule_kind = schedule_kind_from_string(value);
        else if (key == "schedule.T") cfg.total_steps = std::stoi(value);
        else if (key == "schedule.beta_start") cfg.beta_start = std::stod(value);
        else if (key == "schedule.beta_end") cfg.beta_end = std::stod(value);
        else if (key == "codec.kind") cfg.codec = codec_choice_from_string(value);
        else if (key == "codec.p") cfg.patch = std::stoi(value);
        else if (key == "codec.c") cfg.latent_channels = std::stoi(value);
        else if (key == "denoiser.kind") cfg.denoiser = denoiser_kind_from_string(value);
        else if (key == "denoiser.buckets") cfg.buckets = std::stoi(value);
        else if (key == "denoiser.lambda") cfg.ridge_lambda = std::stod(value);
        else if (key == "denoiser.hidden") cfg.hidden = std::stoi(value);
        else if (key == "denoiser.epochs") cfg.epochs = std::stoi(value);
        else if (key == "denoiser.batch") cfg.batch_size = std::stoi(value);
        else if (key == "denoiser.lr") cfg.learning_rate = std::stod(value);
        else if (key == "denoiser.momentum") cfg.momentum = std::stod(value);
        else if (key == "denoiser.draws") cfg.linear_draws = std::stoi(value);
        else if (key == "run.paradigm") cfg.paradigm = paradigm_from_string(value);
        else if (key == "run.task") cfg.task = task_from_string(value);
        else if (key == "infer.steps") cfg.n_steps = std::stoi(value);
        else if (key == "infer.ensemble") cfg.ensemble = std::stoi(value);
        else if (key == "infer.seed") cfg.seed = std::stoull(value);
        else if (key == "infer.record_trajectory") cfg.record_trajectory = value == "true" || value == "1";
        else if (key == "infer.carrier_sign_flip") cfg.carrier_sign_flip = value == "true" || value == "1";
        else if (key == "dataset.count") cfg.count = std::stoi(value);
        else if (key == "dataset.res") cfg.resolution = std::stoi(value);
        else if (key == "dataset.train_frac") cfg.train_frac = std::stod(value);
        else throw ConfigError("unknown config key: " + key);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        throw ConfigError("bad value for " + key + ": " + value);
    }
}

}  // namespace detail

inline void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        detail::apply_config_entry(cfg, detail::trim(line.substr(0, eq)),
                                   detail::trim(line.substr(eq + 1)));
    }
}

// The effective merged configuration is written next to every command's
// outputs so reruns are reproducible from the artifact alone.
inline std::string config_to_text(const RunConfig& cfg) {
    std::ostringstream out;
    out.precision(17);
    out << "schedule.kind = " << to_string(cfg.schedule_kind) << "\n";
    out << "schedule.T = " << cfg.total_steps << "\n";
    out << "schedule.beta_start = " << cfg.beta_start << "\n";
    out << "schedule.beta_end = " << cfg.beta_end << "\n";
    out << "codec.kind = " << to_string(cfg.codec) << "\n";
    out << "codec.p = " << cfg.patch << "\n";
    out << "codec.c = " << cfg.latent_channels << "\n";
    out << "denoiser.kind = " << to_string(cfg.denoiser) << "\n";
    out << "denoiser.buckets = " << cfg.buckets << "\n";
    out << "denoiser.lambda = " << cfg.ridge_lambda << "\n";
    out << "denoiser.hidden = " << cfg.hidden << "\n";
    out << "denoiser.epochs = " << cfg.epochs << "\n";
    out << "denoiser.batch = " << cfg.batch_size << "\n";
    out << "denoiser.lr = " << cfg.learning_rate << "\n";
    out << "denoiser.momentum = " << cfg.momentum << "\n";
    out << "denoiser.draws = " << cfg.linear_draws << "\n";
    out << "run.paradigm = " << to_string(cfg.paradigm) << "\n";
    out << "run.task = " << to_string(cfg.task) << "\n";
    out << "infer.steps = " << cfg.n_steps << "\n";
    out << "infer.ensemble = " << cfg.ensemble << "\n";
    out << "infer.seed = " << cfg.seed << "\n";
    out << "infer.record_trajectory = " << (cfg.record_trajectory ? "true" : "false") << "\n";
    out << "infer.carrier_sign_flip = " << (cfg.carrier_sign_flip ? "true" : "false") << "\n";
    out << "dataset.count = " << cfg.count << "\n";
    out << "dataset.res = " << cfg.resolution << "\n";
    out << "dataset.train_frac = " << cfg.train_frac << "\n";
    return out.str();
}

inline void write_effective_config(const RunConfig& cfg, const std::string& dir) {
    std::ofstream out(dir + "/config_effective.txt");
    if (!out) throw IoError("cannot write effective config in " + dir);
    out << config_to_text(cfg);
}

}  // namespace pd
