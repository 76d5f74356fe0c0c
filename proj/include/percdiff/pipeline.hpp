#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "percdiff/config.hpp"
#include "percdiff/dataset.hpp"
#include "percdiff/metrics.hpp"
#include "percdiff/parallel.hpp"
#include "percdiff/percdiff.hpp"

namespace pd {

// End-to-end wiring used by both the CLI subcommands and the integration
// suites: dataset generation, codec fitting, encoding, training, inference
// over a split, evaluation, the beta sweep and the paradigm comparison.

namespace pipeline {

inline std::string fmt(double x) {
    std::ostringstream s;
    s << std::setprecision(12) << x;
    return s.str();
}

struct EvalRow;

inline const char* primary_metric_name(TaskKind task) {
    switch (task) {
        case TaskKind::depth: return "absrel";
        case TaskKind::normal: return "mean_deg";
        case TaskKind::mask: return "mae";
    }
    return "?";
}

inline ImageTensor replicate_channels(const ImageTensor& m, int k) {
    ImageTensor out(m.h, m.w, k);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            for (int ch = 0; ch < k; ++ch) out.at(y, x, ch) = m.at(y, x, ch % m.c);
    return out;
}

inline ImageTensor collapse_channels_mean(const ImageTensor& m) {
    ImageTensor out(m.h, m.w, 1);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            double acc = 0.0;
            for (int ch = 0; ch < m.c; ++ch) acc += m.at(y, x, ch);
            out.at(y, x, 0) = acc / m.c;
        }
    return out;
}

inline const ImageTensor& target_map_of(const Sample& s, TaskKind task) {
    switch (task) {
        case TaskKind::depth: return s.depth;
        case TaskKind::normal: return s.normal;
        case TaskKind::mask: return s.mask;
    }
    throw std::invalid_argument("unknown task");
}

inline int target_channels(TaskKind task) { return task == TaskKind::normal ? 3 : 1; }

// Image and target codecs share (p, c) so the two latent spaces line up.
// With the identity codec a 1-channel target is replicated to the image
// channel count on the way in and mean-collapsed on the way out.
struct TaskCodecs {
    LatentCodec image;
    LatentCodec target;
    bool replicate_target = false;
};

inline Latent encode_target(const TaskCodecs& codecs, const Sample& s, TaskKind task) {
    ImageTensor map = fill_invalid_with_valid_mean(target_map_of(s, task), s.valid);
    if (codecs.replicate_target) map = replicate_channels(map, codecs.target.map_channels);
    return encode(codecs.target, map, LatentTag::label);
}

inline ImageTensor decode_target(const TaskCodecs& codecs, const Latent& z, TaskKind task) {
    ImageTensor map = decode(codecs.target, z);
    if (codecs.replicate_target && target_channels(task) == 1)
        map = collapse_channels_mean(map);
    return map;
}

inline TaskCodecs fit_task_codecs(const RunConfig& cfg, const std::vector<Sample>& train,
                                  TaskKind task) {
    TaskCodecs out;
    if (cfg.codec == CodecChoice::identity) {
        out.image = make_identity_codec(3);
        out.target = make_identity_codec(3);
        out.replicate_target = target_channels(task) == 1;
        return out;
    }
    std::vector<ImageTensor> rgbs, targets;
    std::vector<Mask> valids;
    rgbs.reserve(train.size());
    targets.reserve(train.size());
    valids.reserve(train.size());
    for (const Sample& s : train) {
        rgbs.push_back(s.rgb);
        targets.push_back(target_map_of(s, task));
        valids.push_back(s.valid);
    }
    out.image = fit_codec(std::span<const ImageTensor>(rgbs), cfg.patch, cfg.latent_channels,
                          cfg.seed);
    out.target = fit_codec(std::span<const ImageTensor>(targets),
                           std::span<const Mask>(valids), cfg.patch, cfg.latent_channels,
                           cfg.seed + 1);
    return out;
}

inline std::vector<LatentPair> encode_pairs(const TaskCodecs& codecs,
                                            const std::vector<Sample>& samples, TaskKind task) {
    std::vector<LatentPair> pairs(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        pairs[i].image = encode(codecs.image, samples[i].rgb, LatentTag::image);
        pairs[i].label = encode_target(codecs, samples[i], task);
    });
    return pairs;
}

// ---- gen-data ----

inline DatasetManifest run_gen_data(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("gen-data: --out is required");
    if (cfg.count < 2) throw ConfigError("gen-data: need at least 2 samples");
    std::vector<Sample> samples(static_cast<std::size_t>(cfg.count));
    parallel_for(samples.size(), [&](std::size_t i) {
        CounterRng rng(cfg.seed, streams::scene, i);
        const SceneSpec scene = generate_scene(rng);
        samples[i] = render(scene, cfg.resolution, cfg.resolution);
    });
    const DatasetManifest mf = split_and_save(samples, cfg.train_frac, cfg.out_dir, cfg.seed);
    write_effective_config(cfg, cfg.out_dir);
    return mf;
}

// ---- train ----

struct TrainArtifacts {
    TaskCodecs codecs;
    std::unique_ptr<Denoiser> denoiser;
    std::vector<double> loss_trace;
};

inline TrainArtifacts train_on_samples(const RunConfig& cfg, const std::vector<Sample>& train) {
    TrainArtifacts art;
    art.codecs = fit_task_codecs(cfg, train, cfg.task);
    const std::vector<LatentPair> pairs = encode_pairs(art.codecs, train, cfg.task);
    const VarianceSchedule sched = cfg.make_run_schedule();
    TrainResult res =
        train_denoiser(cfg.denoiser, std::span<const LatentPair>(pairs), sched, cfg.paradigm,
                       cfg.train_config());
    art.denoiser = std::move(res.denoiser);
    art.loss_trace = std::move(res.epoch_loss);
    return art;
}

inline void write_loss_trace(const std::string& path, const std::vector<double>& trace) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "epoch,loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i) out << i << "," << fmt(trace[i]) << "\n";
}

inline TrainArtifacts run_train(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("train: --out is required");
    if (cfg.data_dir.empty()) throw ConfigError("train: --data is required");
    if (cfg.denoiser == DenoiserKind::oracle)
        throw ConfigError("train: the oracle denoiser is a test fixture and is not trainable");
    const DatasetManifest mf = load_manifest(cfg.data_dir);
    const std::vector<Sample> train = load_split(mf, "train");
    if (train.empty()) throw ConfigError("train: empty train split");
    TrainArtifacts art = train_on_samples(cfg, train);
    std::filesystem::create_directories(cfg.out_dir);
    save_codec(cfg.out_dir + "/codec_image.lcd1", art.codecs.image);
    save_codec(cfg.out_dir + "/codec_target.lcd1", art.codecs.target);
    save_denoiser(cfg.out_dir + "/denoiser.dnz1", *art.denoiser);
    write_loss_trace(cfg.out_dir + "/loss_trace.csv", art.loss_trace);
    write_effective_config(cfg, cfg.out_dir);
    return art;
}

// ---- infer ----

struct InferOutputs {
    std::vector<ImageTensor> predictions;
    std::vector<long long> evaluations;
    std::vector<double> wall_seconds;
};

// One inference per test image; per-image results land in their own slots so
// any PD_THREADS value produces identical bytes.
inline InferOutputs infer_on_samples(const RunConfig& cfg, const TaskCodecs& codecs,
                                     Denoiser& denoiser, const std::vector<Sample>& split,
                                     std::vector<InferenceResult>* detail_out = nullptr) {
    InferOutputs out;
    out.predictions.resize(split.size());
    out.evaluations.resize(split.size());
    out.wall_seconds.resize(split.size());
    const VarianceSchedule sched = cfg.make_run_schedule();
    const CodecPair cp{&codecs.image, &codecs.target};
    if (detail_out) detail_out->resize(split.size());
    parallel_for(split.size(), [&](std::size_t i) {
        InferenceConfig icfg;
        icfg.n_steps = cfg.paradigm == Paradigm::one_step ? 1 : cfg.n_steps;
        icfg.ensemble = cfg.paradigm == Paradigm::stochastic_ms ? cfg.ensemble : 1;
        icfg.seed = cfg.seed;
        icfg.sample_index = i;
        icfg.record_trajectory = cfg.record_trajectory && i == 0;
        icfg.carrier_sign_flip = cfg.carrier_sign_flip;
        InferenceResult res = ensemble_infer(cfg.paradigm, denoiser, cp, sched,
                                             split[i].rgb, icfg);
        ImageTensor pred = res.prediction;
        if (codecs.replicate_target && target_channels(cfg.task) == 1)
            pred = collapse_channels_mean(pred);
        quantize_to_f32(pred);
        out.predictions[i] = std::move(pred);
        out.evaluations[i] = res.denoiser_evaluations;
        out.wall_seconds[i] = res.wall_seconds;
        if (detail_out) {
            (*detail_out)[i].denoiser_evaluations = res.denoiser_evaluations;
            (*detail_out)[i].effective_steps = res.effective_steps;
            (*detail_out)[i].trajectory = std::move(res.trajectory);
        }
    });
    return out;
}

inline std::string pred_file(int index) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "pred_test_%04d.f32r", index);
    return buf;
}

inline InferOutputs run_infer(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("infer: --out is required");
    if (cfg.data_dir.empty() || cfg.model_dir.empty())
        throw ConfigError("infer: --data and --model are required");
    const DatasetManifest mf = load_manifest(cfg.data_dir);
    const std::vector<Sample> test = load_split(mf, "test");
    if (test.empty()) throw ConfigError("infer: empty test split");

    TaskCodecs codecs;
    codecs.image = load_codec(cfg.model_dir + "/codec_image.lcd1");
    codecs.target = load_codec(cfg.model_dir + "/codec_target.lcd1");
    codecs.replicate_target = codecs.target.identity && target_channels(cfg.task) == 1;
    std::unique_ptr<Denoiser> denoiser = load_denoiser(cfg.model_dir + "/denoiser.dnz1");

    std::vector<InferenceResult> details;
    InferOutputs out = infer_on_samples(cfg, codecs, *denoiser, test,
                                        cfg.record_trajectory ? &details : nullptr);

    std::filesystem::create_directories(cfg.out_dir);
    for (std::size_t i = 0; i < out.predictions.size(); ++i)
        write_f32r(cfg.out_dir + "/" + pred_file(static_cast<int>(i)), out.predictions[i]);
    std::ofstream csv(cfg.out_dir + "/results.csv");
    if (!csv) throw IoError("cannot write results.csv in " + cfg.out_dir);
    csv << "image,evaluations,wall_ms\n";
    for (std::size_t i = 0; i < out.predictions.size(); ++i)
        csv << i << "," << out.evaluations[i] << "," << fmt(out.wall_seconds[i] * 1e3) << "\n";
    if (cfg.record_trajectory && !details.empty()) {
        InferenceResult traj;
        traj.trajectory = std::move(details[0].trajectory);
        dump_trajectory(cfg.out_dir + "/trajectory", traj);
    }
    write_effective_config(cfg, cfg.out_dir);
    return out;
}

// ---- eval ----

struct EvalRow {
    bool ok = true;
    DepthMetrics depth;
    NormalMetrics normal;
    MaskMetrics mask;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    EvalRow aggregate;
    int flagged = 0;
};

// Headline (lower-is-better) metric per task, used for sweep ordering.
inline double primary_metric(const EvalRow& row, TaskKind task) {
    switch (task) {
        case TaskKind::depth: return row.depth.absrel;
        case TaskKind::normal: return row.normal.mean_deg;
        case TaskKind::mask: return row.mask.mae;
    }
    return 0.0;
}

inline Grid mask_to_unit(const Grid& pm) {
    Grid out = pm;
    for (auto& e : out.v) e = std::clamp((e + 1.0) / 2.0, 0.0, 1.0);
    return out;
}

inline EvalReport evaluate_predictions(const std::vector<ImageTensor>& preds,
                                       const std::vector<Sample>& gt, TaskKind task) {
    if (preds.size() != gt.size())
        throw std::invalid_argument("evaluate: prediction/ground-truth count mismatch");
    EvalReport rep;
    rep.rows.resize(preds.size());
    parallel_for(preds.size(), [&](std::size_t i) {
        EvalRow& row = rep.rows[i];
        try {
            switch (task) {
                case TaskKind::depth:
                    row.depth = depth_metrics(preds[i], gt[i].depth_raw, gt[i].valid);
                    break;
                case TaskKind::normal:
                    row.normal = normal_metrics(preds[i], gt[i].normal, gt[i].valid);
                    break;
                case TaskKind::mask:
                    row.mask = mask_metrics(mask_to_unit(preds[i]), mask_to_unit(gt[i].mask));
                    break;
            }
        } catch (const std::invalid_argument&) {
            row.ok = false;
        }
    });
    int n_ok = 0;
    for (const EvalRow& row : rep.rows) {
        if (!row.ok) {
            ++rep.flagged;
            continue;
        }
        ++n_ok;
        rep.aggregate.depth.absrel += row.depth.absrel;
        rep.aggregate.depth.delta1 += row.depth.delta1;
        rep.aggregate.depth.n_valid += row.depth.n_valid;
        rep.aggregate.normal.mean_deg += row.normal.mean_deg;
        rep.aggregate.normal.median_deg += row.normal.median_deg;
        rep.aggregate.normal.rmse_deg += row.normal.rmse_deg;
        rep.aggregate.normal.pct_11_25 += row.normal.pct_11_25;
        rep.aggregate.normal.pct_22_5 += row.normal.pct_22_5;
        rep.aggregate.normal.pct_30 += row.normal.pct_30;
        rep.aggregate.mask.mae += row.mask.mae;
        rep.aggregate.mask.max_f_beta += row.mask.max_f_beta;
        rep.aggregate.mask.sad += row.mask.sad;
        rep.aggregate.mask.mse += row.mask.mse;
        rep.aggregate.mask.mad += row.mask.mad;
    }
    if (n_ok > 0) {
        const double n = n_ok;
        rep.aggregate.depth.absrel /= n;
        rep.aggregate.depth.delta1 /= n;
        rep.aggregate.normal.mean_deg /= n;
        rep.aggregate.normal.median_deg /= n;
        rep.aggregate.normal.rmse_deg /= n;
        rep.aggregate.normal.pct_11_25 /= n;
        rep.aggregate.normal.pct_22_5 /= n;
        rep.aggregate.normal.pct_30 /= n;
        rep.aggregate.mask.mae /= n;
        rep.aggregate.mask.max_f_beta /= n;
        rep.aggregate.mask.sad /= n;
        rep.aggregate.mask.mse /= n;
        rep.aggregate.mask.mad /= n;
    }
    return rep;
}

inline void write_eval_csv(const std::string& path, const EvalReport& rep, TaskKind task) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    const auto depth_cols = [&](const DepthMetrics& d) {
        out << fmt(d.absrel) << "," << fmt(d.delta1) << "," << d.n_valid;
    };
    const auto normal_cols = [&](const NormalMetrics& nm) {
        out << fmt(nm.mean_deg) << "," << fmt(nm.median_deg) << "," << fmt(nm.rmse_deg) << ","
            << fmt(nm.pct_11_25) << "," << fmt(nm.pct_22_5) << "," << fmt(nm.pct_30) << ","
            << nm.zero_pred_pixels;
    };
    const auto mask_cols = [&](const MaskMetrics& mm) {
        out << fmt(mm.mae) << "," << fmt(mm.max_f_beta) << "," << fmt(mm.sad) << ","
            << fmt(mm.mse) << "," << fmt(mm.mad) << "," << (mm.gt_empty ? 1 : 0);
    };
    switch (task) {
        case TaskKind::depth: out << "image,status,absrel,delta1,n_valid\n"; break;
        case TaskKind::normal:
            out << "image,status,mean_deg,median_deg,rmse_deg,pct_11_25,pct_22_5,pct_30,zero_pred\n";
            break;
        case TaskKind::mask: out << "image,status,mae,max_f_beta,sad,mse,mad,gt_empty\n"; break;
    }
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        const EvalRow& row = rep.rows[i];
        out << i << "," << (row.ok ? "ok" : "degenerate");
        if (!row.ok) {
            out << "\n";
            continue;
        }
        out << ",";
        if (task == TaskKind::depth) depth_cols(row.depth);
        if (task == TaskKind::normal) normal_cols(row.normal);
        if (task == TaskKind::mask) mask_cols(row.mask);
        out << "\n";
    }
    out << "aggregate,ok,";
    if (task == TaskKind::depth) depth_cols(rep.aggregate.depth);
    if (task == TaskKind::normal) normal_cols(rep.aggregate.normal);
    if (task == TaskKind::mask) mask_cols(rep.aggregate.mask);
    out << "\n";
}

inline EvalReport run_eval(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("eval: --out is required");
    if (cfg.data_dir.empty() || cfg.pred_dir.empty())
        throw ConfigError("eval: --data and --pred are required");
    const DatasetManifest mf = load_manifest(cfg.data_dir);
    const std::vector<Sample> test = load_split(mf, "test");
    std::vector<ImageTensor> preds(test.size());
    for (std::size_t i = 0; i < preds.size(); ++i)
        preds[i] = read_f32r(cfg.pred_dir + "/" + pred_file(static_cast<int>(i)));
    const EvalReport rep = evaluate_predictions(preds, test, cfg.task);
    std::filesystem::create_directories(cfg.out_dir);
    write_eval_csv(cfg.out_dir + "/metrics_" + std::string(to_string(cfg.task)) + ".csv", rep,
                   cfg.task);
    write_effective_config(cfg, cfg.out_dir);
    return rep;
}

// ---- beta sweep ----

struct SweepRow {
    std::string label;
    ScheduleKind kind = ScheduleKind::scaled_linear;
    double beta_start = 0.0;
    double beta_end = 0.0;
    bool ok = false;
    std::string error;
    long long evaluations = 0;  // total over the test split
    EvalRow metrics;
};

// The deterministic multi-step paradigm retrained and re-evaluated for each
// schedule: the four swept (beta_start, beta_end) pairs plus the all-ones
// schedule that collapses to one-step inference.
inline std::vector<SweepRow> run_beta_sweep_rows(const RunConfig& base,
                                                 const std::vector<Sample>& train,
                                                 const std::vector<Sample>& test) {
    struct PairSpec {
        ScheduleKind kind;
        double bs, be;
        const char* label;
    };
    const PairSpec specs[] = {
        {ScheduleKind::scaled_linear, 0.00085, 0.012, "sl_0.00085_0.012"},
        {ScheduleKind::scaled_linear, 0.0034, 0.048, "sl_0.0034_0.048"},
        {ScheduleKind::scaled_linear, 0.136, 0.192, "sl_0.136_0.192"},
        {ScheduleKind::scaled_linear, 0.544, 0.768, "sl_0.544_0.768"},
        {ScheduleKind::constant_one, 1.0, 1.0, "constant_one"},
    };
    std::vector<SweepRow> rows;
    for (const PairSpec& ps : specs) {
        SweepRow row;
        row.label = ps.label;
        row.kind = ps.kind;
        row.beta_start = ps.bs;
        row.beta_end = ps.be;
        try {
            RunConfig cfg = base;
            cfg.paradigm = Paradigm::deterministic_ms;
            cfg.schedule_kind = ps.kind;
            cfg.beta_start = ps.bs;
            cfg.beta_end = ps.be;
            TrainArtifacts art = train_on_samples(cfg, train);
            const InferOutputs out = infer_on_samples(cfg, art.codecs, *art.denoiser, test);
            for (long long e : out.evaluations) row.evaluations += e;
            const EvalReport rep = evaluate_predictions(out.predictions, test, cfg.task);
            if (rep.flagged == static_cast<int>(rep.rows.size()))
                throw std::runtime_error("all evaluation rows degenerate");
            row.metrics = rep.aggregate;
            row.ok = true;
        } catch (const std::exception& ex) {
            row.error = ex.what();
        }
        rows.push_back(row);
    }
    return rows;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows,
                            TaskKind task) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "label,kind,beta_start,beta_end,status,evaluations";
    if (task == TaskKind::depth) out << ",absrel,delta1";
    if (task == TaskKind::normal) out << ",mean_deg,median_deg,rmse_deg";
    if (task == TaskKind::mask) out << ",mae,max_f_beta";
    out << "\n";
    for (const SweepRow& row : rows) {
        out << row.label << "," << to_string(row.kind) << "," << fmt(row.beta_start) << ","
            << fmt(row.beta_end) << "," << (row.ok ? "ok" : "failed") << "," << row.evaluations;
        if (row.ok) {
            if (task == TaskKind::depth)
                out << "," << fmt(row.metrics.depth.absrel) << ","
                    << fmt(row.metrics.depth.delta1);
            if (task == TaskKind::normal)
                out << "," << fmt(row.metrics.normal.mean_deg) << ","
                    << fmt(row.metrics.normal.median_deg) << ","
                    << fmt(row.metrics.normal.rmse_deg);
            if (task == TaskKind::mask)
                out << "," << fmt(row.metrics.mask.mae) << ","
                    << fmt(row.metrics.mask.max_f_beta);
        } else {
            if (task == TaskKind::depth) out << ",,";
            if (task == TaskKind::normal) out << ",,,";
            if (task == TaskKind::mask) out << ",,";
        }
        out << "\n";
    }
}

// ---- paradigm comparison ----

struct ParadigmRow {
    std::string label;
    Paradigm paradigm = Paradigm::one_step;
    int ensemble = 1;
    int n_steps = 1;
    bool ok = false;
    std::string error;
    long long evaluations_per_image = 0;
    double wall_seconds_total = 0.0;
    EvalRow metrics;
};

// Rows mirror the comparison layout: stochastic with and without ensemble,
// deterministic multi-step, one-step. One denoiser is trained per paradigm
// under the shared configuration; the two stochastic rows share theirs.
inline std::vector<ParadigmRow> run_paradigm_comparison(
    const RunConfig& base, const std::vector<Sample>& train, const std::vector<Sample>& test,
    std::vector<std::vector<ImageTensor>>* heatmaps_out = nullptr) {
    struct RowSpec {
        Paradigm paradigm;
        int ensemble;
        int steps;
        const char* label;
    };
    const RowSpec specs[] = {
        {Paradigm::stochastic_ms, base.ensemble, base.n_steps, "stochastic_ensemble"},
        {Paradigm::stochastic_ms, 1, base.n_steps, "stochastic_single"},
        {Paradigm::deterministic_ms, 1, base.n_steps, "deterministic_ms"},
        {Paradigm::one_step, 1, 1, "one_step"},
    };

    std::vector<ParadigmRow> rows;
    std::unique_ptr<TrainArtifacts> stochastic_model;
    if (heatmaps_out) heatmaps_out->clear();
    for (const RowSpec& rs : specs) {
        ParadigmRow row;
        row.label = rs.label;
        row.paradigm = rs.paradigm;
        row.ensemble = rs.ensemble;
        row.n_steps = rs.steps;
        try {
            RunConfig cfg = base;
            cfg.paradigm = rs.paradigm;
            cfg.ensemble = rs.ensemble;
            cfg.n_steps = rs.steps;
            if (rs.paradigm == Paradigm::one_step) {
                cfg.schedule_kind = ScheduleKind::constant_one;
                cfg.beta_start = 1.0;
                cfg.beta_end = 1.0;
            }
            TrainArtifacts* model = nullptr;
            std::unique_ptr<TrainArtifacts> own;
            if (rs.paradigm == Paradigm::stochastic_ms) {
                if (!stochastic_model)
                    stochastic_model =
                        std::make_unique<TrainArtifacts>(train_on_samples(cfg, train));
                model = stochastic_model.get();
            } else {
                own = std::make_unique<TrainArtifacts>(train_on_samples(cfg, train));
                model = own.get();
            }
            const InferOutputs out = infer_on_samples(cfg, model->codecs, *model->denoiser, test);
            row.evaluations_per_image = out.evaluations.empty() ? 0 : out.evaluations[0];
            for (std::size_t i = 0; i < out.evaluations.size(); ++i) {
                if (out.evaluations[i] != row.evaluations_per_image)
                    throw std::runtime_error("evaluation count varies across images");
                row.wall_seconds_total += out.wall_seconds[i];
            }
            const EvalReport rep = evaluate_predictions(out.predictions, test, cfg.task);
            if (rep.flagged == static_cast<int>(rep.rows.size()))
                throw std::runtime_error("all evaluation rows degenerate");
            row.metrics = rep.aggregate;
            row.ok = true;
            if (heatmaps_out) {
                std::vector<ImageTensor> maps(test.size());
                parallel_for(test.size(), [&](std::size_t i) {
                    const ImageTensor& gt = target_map_of(test[i], base.task);
                    ImageTensor err = out.predictions[i];
                    require_same_shape(err, gt, "heatmap");
                    for (std::size_t j = 0; j < err.v.size(); ++j)
                        err.v[j] = std::abs(err.v[j] - gt.v[j]);
                    quantize_to_f32(err);
                    maps[i] = std::move(err);
                });
                heatmaps_out->push_back(std::move(maps));
            }
        } catch (const std::exception& ex) {
            row.error = ex.what();
            if (heatmaps_out) heatmaps_out->emplace_back();
        }
        rows.push_back(row);
    }
    return rows;
}

inline void write_paradigm_csv(const std::string& path, const std::vector<ParadigmRow>& rows,
                               TaskKind task) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "label,paradigm,ensemble,n_steps,status,evaluations_per_image";
    if (task == TaskKind::depth) out << ",absrel,delta1";
    if (task == TaskKind::normal) out << ",mean_deg,median_deg,rmse_deg";
    if (task == TaskKind::mask) out << ",mae,max_f_beta";
    out << ",wall_ms_total\n";
    for (const ParadigmRow& row : rows) {
        out << row.label << "," << to_string(row.paradigm) << "," << row.ensemble << ","
            << row.n_steps << "," << (row.ok ? "ok" : "failed") << ","
            << row.evaluations_per_image;
        if (row.ok) {
            if (task == TaskKind::depth)
                out << "," << fmt(row.metrics.depth.absrel) << ","
                    << fmt(row.metrics.depth.delta1);
            if (task == TaskKind::normal)
                out << "," << fmt(row.metrics.normal.mean_deg) << ","
                    << fmt(row.metrics.normal.median_deg) << ","
                    << fmt(row.metrics.normal.rmse_deg);
            if (task == TaskKind::mask)
                out << "," << fmt(row.metrics.mask.mae) << ","
                    << fmt(row.metrics.mask.max_f_beta);
        } else {
            if (task == TaskKind::depth || task == TaskKind::mask) out << ",,";
            if (task == TaskKind::normal) out << ",,,";
        }
        out << "," << fmt(row.wall_seconds_total * 1e3) << "\n";
    }
}

}  // namespace pipeline
}  // namespace pd
