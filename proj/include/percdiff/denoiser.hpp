#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "percdiff/errors.hpp"
#include "percdiff/grid.hpp"
#include "percdiff/io.hpp"
#include "percdiff/rng.hpp"
#include "percdiff/schedule.hpp"

namespace pd {

enum class Paradigm { stochastic_ms, deterministic_ms, one_step };

inline const char* to_string(Paradigm p) {
    switch (p) {
        case Paradigm::stochastic_ms: return "stochastic_ms";
        case Paradigm::deterministic_ms: return "deterministic_ms";
        case Paradigm::one_step: return "one_step";
    }
    return "?";
}

inline Paradigm paradigm_from_string(const std::string& s) {
    if (s == "stochastic_ms") return Paradigm::stochastic_ms;
    if (s == "deterministic_ms") return Paradigm::deterministic_ms;
    if (s == "one_step") return Paradigm::one_step;
    throw ConfigError("unknown paradigm: " + s);
}

enum class DenoiserKind { oracle, linear, mlp };

inline const char* to_string(DenoiserKind k) {
    switch (k) {
        case DenoiserKind::oracle: return "oracle";
        case DenoiserKind::linear: return "linear";
        case DenoiserKind::mlp: return "mlp";
    }
    return "?";
}

inline DenoiserKind denoiser_kind_from_string(const std::string& s) {
    if (s == "oracle") return DenoiserKind::oracle;
    if (s == "linear") return DenoiserKind::linear;
    if (s == "mlp") return DenoiserKind::mlp;
    throw ConfigError("unknown denoiser kind: " + s);
}

// One prediction request: the running latent state, the optional clean image
// latent it is concatenated with (stochastic paradigm only), and the timestep.
struct DenoiserInput {
    Latent state;
    std::optional<Latent> condition;
    int timestep = 1;
};

// Velocity target: sqrt(abar)*carrier - sqrt(1-abar)*z_y. With a Gaussian
// carrier this is the stochastic objective, with the image latent the
// deterministic one; at abar == 0 it collapses to -z_y exactly.
inline Latent v_target_from_alpha_bar(double ab, const Latent& z_y, const Latent& carrier) {
    require_same_shape(z_y, carrier, "v_target");
    if (ab == 0.0) return negated(z_y);
    if (ab == 1.0) {
        Latent r = carrier;
        r.tag = LatentTag::label;
        return r;
    }
    Latent r = lincomb(std::sqrt(ab), carrier, -std::sqrt(1.0 - ab), z_y);
    r.tag = LatentTag::label;
    return r;
}

inline Latent v_target(const VarianceSchedule& s, int t, const Latent& z_y,
                       const Latent& carrier) {
    return v_target_from_alpha_bar(s.alpha_bar(t), z_y, carrier);
}

// Velocity predictor abstraction. Implementations are deterministic functions
// of their parameters and the input; trained denoisers are immutable and
// predict_v is safe to call concurrently. begin_pass is a per-inference-pass
// notification carrying the pass's initial latent; trained denoisers ignore
// it, the oracle captures its carrier there.
class Denoiser {
  public:
    virtual ~Denoiser() = default;
    virtual Latent predict_v(const DenoiserInput& in) const = 0;
    virtual void begin_pass(const Latent& /*initial_state*/) {}
    virtual bool accepts_condition() const = 0;
    virtual bool requires_condition() const = 0;
    virtual DenoiserKind kind() const = 0;
};

// Test fixture: returns the exact velocity target of the bound sample. The
// carrier is either bound explicitly or captured from the pass's initial
// state (which is the carrier for every paradigm's initialization).
class OracleDenoiser : public Denoiser {
  public:
    explicit OracleDenoiser(const VarianceSchedule& schedule) : schedule_(schedule) {}

    void bind(Latent label, Latent carrier) {
        label_ = std::move(label);
        carrier_ = std::move(carrier);
        have_label_ = true;
        have_carrier_ = true;
    }
    void bind_label(Latent label) {
        label_ = std::move(label);
        have_label_ = true;
    }
    void begin_pass(const Latent& initial_state) override {
        carrier_ = initial_state;
        have_carrier_ = true;
    }

    Latent predict_v(const DenoiserInput& in) const override {
        if (!have_label_ || !have_carrier_)
            throw std::logic_error("OracleDenoiser: no sample bound");
        return v_target(schedule_, in.timestep, label_, carrier_);
    }

    bool accepts_condition() const override { return true; }
    bool requires_condition() const override { return false; }
    DenoiserKind kind() const override { return DenoiserKind::oracle; }

  private:
    VarianceSchedule schedule_;
    Latent label_;
    Latent carrier_;
    bool have_label_ = false;
    bool have_carrier_ = false;
};

namespace detail {

// Flattened [state; condition-if-present; sqrt(abar_t)] feature vector.
inline Eigen::VectorXd assemble_features(const Latent& state, const Latent* cond,
                                         double sqrt_ab) {
    const std::size_t n = state.v.size();
    const std::size_t m = cond ? cond->v.size() : 0;
    Eigen::VectorXd f(static_cast<Eigen::Index>(n + m + 1));
    for (std::size_t i = 0; i < n; ++i) f(static_cast<Eigen::Index>(i)) = state.v[i];
    if (cond) {
        require_same_shape(state, *cond, "denoiser condition");
        for (std::size_t i = 0; i < m; ++i) f(static_cast<Eigen::Index>(n + i)) = cond->v[i];
    }
    f(static_cast<Eigen::Index>(n + m)) = sqrt_ab;
    return f;
}

inline Latent latent_from_vector(const Eigen::VectorXd& y, int h, int w, int c) {
    Latent z = make_latent(Grid(h, w, c), LatentTag::label);
    for (std::size_t i = 0; i < z.v.size(); ++i) z.v[i] = y(static_cast<Eigen::Index>(i));
    return z;
}

}  // namespace detail

// Per-timestep-bucket affine model on the flattened feature vector. Bucket of
// t is ceil(t*B/T), so the closed-form ridge fit stays exact per regime.
class LinearDenoiser : public Denoiser {
  public:
    VarianceSchedule schedule;
    int buckets = 8;
    bool conditioned = false;
    int state_h = 0, state_w = 0, state_c = 0;
    double ridge_lambda = 0.0;
    std::vector<Eigen::MatrixXd> weight;  // per bucket: out_dim x feat_dim
    std::vector<Eigen::VectorXd> bias;    // per bucket: out_dim

    LinearDenoiser(const VarianceSchedule& sched, int n_buckets, bool with_condition, int h,
                   int w, int c, double lambda)
        : schedule(sched),
          buckets(n_buckets),
          conditioned(with_condition),
          state_h(h),
          state_w(w),
          state_c(c),
          ridge_lambda(lambda) {
        if (n_buckets < 1) throw std::invalid_argument("LinearDenoiser: buckets must be >= 1");
        const int out = h * w * c;
        const int feat = feature_dim();
        weight.assign(static_cast<std::size_t>(buckets), Eigen::MatrixXd::Zero(out, feat));
        bias.assign(static_cast<std::size_t>(buckets), Eigen::VectorXd::Zero(out));
    }

    int feature_dim() const { return state_h * state_w * state_c * (conditioned ? 2 : 1) + 1; }
    int out_dim() const { return state_h * state_w * state_c; }

    int bucket_of(int t) const {
        schedule.check_t(t);
        int b = static_cast<int>((static_cast<long long>(t) * buckets + schedule.total_steps - 1) /
                                 schedule.total_steps);
        return std::min(std::max(b, 1), buckets);
    }

    Latent predict_v(const DenoiserInput& in) const override {
        const double sab = std::sqrt(schedule.alpha_bar(in.timestep));
        const Eigen::VectorXd f = detail::assemble_features(
            in.state, in.condition ? &*in.condition : nullptr, sab);
        if (f.size() != feature_dim())
            throw std::invalid_argument("LinearDenoiser: feature size mismatch");
        const std::size_t b = static_cast<std::size_t>(bucket_of(in.timestep) - 1);
        const Eigen::VectorXd y = weight[b] * f + bias[b];
        return detail::latent_from_vector(y, state_h, state_w, state_c);
    }

    bool accepts_condition() const override { return conditioned; }
    bool requires_condition() const override { return conditioned; }
    DenoiserKind kind() const override { return DenoiserKind::linear; }
};

// Two-layer tanh network on the same feature vector, trained by momentum SGD
// with analytic gradients.
class MlpDenoiser : public Denoiser {
  public:
    VarianceSchedule schedule;
    bool conditioned = false;
    int state_h = 0, state_w = 0, state_c = 0;
    Eigen::MatrixXd w1;  // hidden x feat
    Eigen::VectorXd b1;  // hidden
    Eigen::MatrixXd w2;  // out x hidden
    Eigen::VectorXd b2;  // out

    MlpDenoiser(const VarianceSchedule& sched, int hidden, bool with_condition, int h, int w,
                int c)
        : schedule(sched), conditioned(with_condition), state_h(h), state_w(w), state_c(c) {
        if (hidden < 1) throw std::invalid_argument("MlpDenoiser: hidden width must be >= 1");
        const int feat = feature_dim();
        const int out = out_dim();
        w1 = Eigen::MatrixXd::Zero(hidden, feat);
        b1 = Eigen::VectorXd::Zero(hidden);
        w2 = Eigen::MatrixXd::Zero(out, hidden);
        b2 = Eigen::VectorXd::Zero(out);
    }

    int feature_dim() const { return state_h * state_w * state_c * (conditioned ? 2 : 1) + 1; }
    int out_dim() const { return state_h * state_w * state_c; }
    int hidden_dim() const { return static_cast<int>(w1.rows()); }

    void init_weights(std::uint64_t seed) {
        CounterRng r1(seed, streams::weight_init, 1);
        CounterRng r2(seed, streams::weight_init, 2);
        const double s1 = 1.0 / std::sqrt(static_cast<double>(w1.cols()));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(w2.cols()));
        for (Eigen::Index i = 0; i < w1.rows(); ++i)
            for (Eigen::Index j = 0; j < w1.cols(); ++j) w1(i, j) = s1 * r1.normal();
        for (Eigen::Index i = 0; i < w2.rows(); ++i)
            for (Eigen::Index j = 0; j < w2.cols(); ++j) w2(i, j) = s2 * r2.normal();
        b1.setZero();
        b2.setZero();
    }

    Latent predict_v(const DenoiserInput& in) const override {
        const double sab = std::sqrt(schedule.alpha_bar(in.timestep));
        const Eigen::VectorXd f = detail::assemble_features(
            in.state, in.condition ? &*in.condition : nullptr, sab);
        if (f.size() != feature_dim())
            throw std::invalid_argument("MlpDenoiser: feature size mismatch");
        const Eigen::VectorXd a = (w1 * f + b1).array().tanh();
        const Eigen::VectorXd y = w2 * a + b2;
        return detail::latent_from_vector(y, state_h, state_w, state_c);
    }

    bool accepts_condition() const override { return conditioned; }
    bool requires_condition() const override { return conditioned; }
    DenoiserKind kind() const override { return DenoiserKind::mlp; }
};

// Row-major batches: one feature/target row per training example.
struct TrainBatch {
    Eigen::MatrixXd features;  // n x feat
    Eigen::MatrixXd targets;   // n x out
};

struct MlpGradient {
    Eigen::MatrixXd dw1;
    Eigen::VectorXd db1;
    Eigen::MatrixXd dw2;
    Eigen::VectorXd db2;
};

// Loss convention everywhere: mean over rows and output components of the
// squared residual.
inline double mlp_batch_loss(const MlpDenoiser& net, const TrainBatch& batch) {
    const Eigen::MatrixXd a =
        ((batch.features * net.w1.transpose()).rowwise() + net.b1.transpose()).array().tanh();
    const Eigen::MatrixXd resid =
        ((a * net.w2.transpose()).rowwise() + net.b2.transpose()) - batch.targets;
    return resid.squaredNorm() /
           static_cast<double>(batch.targets.rows() * batch.targets.cols());
}

// Exact gradient of the batch loss with respect to every parameter.
inline MlpGradient mlp_gradient(const MlpDenoiser& net, const TrainBatch& batch) {
    const Eigen::Index n = batch.features.rows();
    const Eigen::MatrixXd a =
        ((batch.features * net.w1.transpose()).rowwise() + net.b1.transpose()).array().tanh();
    const Eigen::MatrixXd resid =
        ((a * net.w2.transpose()).rowwise() + net.b2.transpose()) - batch.targets;
    const double scale = 2.0 / static_cast<double>(n * batch.targets.cols());
    const Eigen::MatrixXd dp = scale * resid;                       // n x out
    MlpGradient g;
    g.dw2 = dp.transpose() * a;                                     // out x hidden
    g.db2 = dp.colwise().sum().transpose();                         // out
    const Eigen::MatrixXd da = dp * net.w2;                         // n x hidden
    const Eigen::MatrixXd dz = da.array() * (1.0 - a.array().square());
    g.dw1 = dz.transpose() * batch.features;                        // hidden x feat
    g.db1 = dz.colwise().sum().transpose();                         // hidden
    return g;
}

// Mean over valid pixels of (|err| + err^2) / 2; invalid pixels contribute
// nothing. Companion loss for map-space supervision of decode heads.
inline double masked_map_loss(const ImageTensor& pred, const ImageTensor& gt,
                              const Mask& valid) {
    require_same_shape(pred, gt, "masked_map_loss");
    if (pred.h != valid.h || pred.w != valid.w)
        throw std::invalid_argument("masked_map_loss: mask shape mismatch");
    double acc = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < pred.h; ++y)
        for (int x = 0; x < pred.w; ++x)
            if (valid.at(y, x))
                for (int ch = 0; ch < pred.c; ++ch) {
                    const double e = pred.at(y, x, ch) - gt.at(y, x, ch);
                    acc += (std::abs(e) + e * e) * 0.5;
                    ++n;
                }
    if (n == 0) throw std::invalid_argument("masked_map_loss: empty valid mask");
    return acc / static_cast<double>(n);
}

struct TrainConfig {
    int epochs = 200;
    int batch_size = 16;
    double learning_rate = 2e-3;  // linearly decayed to 0 over training
    double momentum = 0.9;
    std::uint64_t seed = 0;
    Paradigm paradigm = Paradigm::one_step;
    double ridge_lambda = 1e-6;
    int buckets = 8;
    int hidden = 64;
    // (t, carrier) draws per sample for the closed-form linear fit; one-step
    // rows are deterministic so a single draw suffices there.
    int linear_draws = 4;
};

// One encoded training example.
struct LatentPair {
    Latent image;  // z_x
    Latent label;  // z_y
};

struct TrainResult {
    std::unique_ptr<Denoiser> denoiser;
    std::vector<double> epoch_loss;
};

namespace detail {

// Training row for one (example, draw) pair under the chosen paradigm.
struct TrainRow {
    Latent state;
    const Latent* condition = nullptr;
    int timestep = 1;
    Latent target;
};

inline TrainRow make_train_row(Paradigm paradigm, const VarianceSchedule& sched,
                               const LatentPair& pair, std::uint64_t seed, std::uint64_t i,
                               std::uint64_t draw) {
    TrainRow row;
    switch (paradigm) {
        case Paradigm::stochastic_ms: {
            CounterRng trng(seed, streams::timestep, i, draw);
            row.timestep = trng.uniform_int(1, sched.total_steps);
            CounterRng crng(seed, streams::carrier, i, draw);
            const Latent eps = make_latent(
                gaussian_grid(pair.label.h, pair.label.w, pair.label.c, crng), LatentTag::label);
            row.state = blend_forward(sched, row.timestep, pair.label, eps);
            row.condition = &pair.image;
            row.target = v_target(sched, row.timestep, pair.label, eps);
            break;
        }
        case Paradigm::deterministic_ms: {
            CounterRng trng(seed, streams::timestep, i, draw);
            row.timestep = trng.uniform_int(1, sched.total_steps);
            row.state = blend_forward(sched, row.timestep, pair.label, pair.image);
            row.target = v_target(sched, row.timestep, pair.label, pair.image);
            break;
        }
        case Paradigm::one_step: {
            row.timestep = 1;
            row.state = pair.image;
            row.target = v_target_from_alpha_bar(0.0, pair.label, pair.image);
            break;
        }
    }
    return row;
}

inline void row_into_matrices(const VarianceSchedule& sched, const TrainRow& row,
                              Eigen::MatrixXd& features, Eigen::MatrixXd& targets,
                              Eigen::Index r) {
    const double sab = std::sqrt(sched.alpha_bar(row.timestep));
    const Eigen::VectorXd f = assemble_features(row.state, row.condition, sab);
    features.row(r) = f.transpose();
    for (std::size_t j = 0; j < row.target.v.size(); ++j)
        targets(r, static_cast<Eigen::Index>(j)) = row.target.v[j];
}

inline TrainResult train_linear(std::span<const LatentPair> data, const VarianceSchedule& sched,
                                Paradigm paradigm, const TrainConfig& cfg) {
    const Latent& z0 = data[0].label;
    const bool conditioned = paradigm == Paradigm::stochastic_ms;
    auto net = std::make_unique<LinearDenoiser>(sched, cfg.buckets, conditioned, z0.h, z0.w,
                                                z0.c, cfg.ridge_lambda);
    const int feat = net->feature_dim();
    const int out = net->out_dim();
    const std::uint64_t draws = paradigm == Paradigm::one_step
                                    ? 1
                                    : static_cast<std::uint64_t>(std::max(cfg.linear_draws, 1));

    // One accumulation pass per bucket keeps peak memory at a single set of
    // normal equations; draws are counter-keyed so every pass regenerates
    // identical rows.
    for (int b = 1; b <= cfg.buckets; ++b) {
        Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(feat, feat);
        Eigen::MatrixXd xty = Eigen::MatrixXd::Zero(feat, out);
        Eigen::VectorXd sum_x = Eigen::VectorXd::Zero(feat);
        Eigen::VectorXd sum_y = Eigen::VectorXd::Zero(out);
        double n = 0.0;
        for (std::uint64_t draw = 0; draw < draws; ++draw) {
            for (std::size_t i = 0; i < data.size(); ++i) {
                const TrainRow row = make_train_row(paradigm, sched, data[i], cfg.seed, i, draw);
                if (net->bucket_of(row.timestep) != b) continue;
                const double sab = std::sqrt(sched.alpha_bar(row.timestep));
                const Eigen::VectorXd f = assemble_features(row.state, row.condition, sab);
                Eigen::VectorXd y(out);
                for (std::size_t j = 0; j < row.target.v.size(); ++j)
                    y(static_cast<Eigen::Index>(j)) = row.target.v[j];
                xtx.selfadjointView<Eigen::Lower>().rankUpdate(f);
                xty.noalias() += f * y.transpose();
                sum_x += f;
                sum_y += y;
                n += 1.0;
            }
        }
        if (n == 0.0) continue;  // bucket never sampled; stays at zero
        const Eigen::VectorXd mean_x = sum_x / n;
        const Eigen::VectorXd mean_y = sum_y / n;
        Eigen::MatrixXd xtx_c = Eigen::MatrixXd(xtx.selfadjointView<Eigen::Lower>()) -
                                n * mean_x * mean_x.transpose();
        const Eigen::MatrixXd xty_c = xty - n * mean_x * mean_y.transpose();
        Eigen::MatrixXd solved;  // feat x out
        if (cfg.ridge_lambda == 0.0) {
            Eigen::FullPivLU<Eigen::MatrixXd> lu(xtx_c);
            if (!lu.isInvertible())
                throw TrainingDivergenceError("linear fit: singular normal equations at lambda=0");
            solved = lu.solve(xty_c);
        } else {
            xtx_c.diagonal().array() += cfg.ridge_lambda;
            solved = Eigen::LDLT<Eigen::MatrixXd>(xtx_c).solve(xty_c);
        }
        net->weight[static_cast<std::size_t>(b - 1)] = solved.transpose();
        net->bias[static_cast<std::size_t>(b - 1)] = mean_y - solved.transpose() * mean_x;
    }

    // Final data loss over the same rows.
    double acc = 0.0;
    double rows = 0.0;
    for (std::uint64_t draw = 0; draw < draws; ++draw) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            const TrainRow row = make_train_row(paradigm, sched, data[i], cfg.seed, i, draw);
            DenoiserInput in;
            in.state = row.state;
            if (row.condition) in.condition = *row.condition;
            in.timestep = row.timestep;
            const Latent pred = net->predict_v(in);
            for (std::size_t j = 0; j < pred.v.size(); ++j) {
                const double e = pred.v[j] - row.target.v[j];
                acc += e * e;
            }
            rows += 1.0;
        }
    }
    TrainResult res;
    res.epoch_loss = {acc / (rows * out)};
    if (!std::isfinite(res.epoch_loss[0]))
        throw TrainingDivergenceError("linear fit: non-finite training loss");
    res.denoiser = std::move(net);
    return res;
}

inline TrainResult train_mlp(std::span<const LatentPair> data, const VarianceSchedule& sched,
                             Paradigm paradigm, const TrainConfig& cfg) {
    const Latent& z0 = data[0].label;
    const bool conditioned = paradigm == Paradigm::stochastic_ms;
    auto net = std::make_unique<MlpDenoiser>(sched, cfg.hidden, conditioned, z0.h, z0.w, z0.c);
    net->init_weights(cfg.seed);
    const int feat = net->feature_dim();
    const int out = net->out_dim();
    const Eigen::Index n = static_cast<Eigen::Index>(data.size());

    // Fixed evaluation rows: the per-epoch loss trace is measured on the same
    // draws every epoch so the trace reflects parameter movement only.
    TrainBatch eval;
    eval.features.resize(n, feat);
    eval.targets.resize(n, out);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const TrainRow row =
            make_train_row(paradigm, sched, data[i], cfg.seed ^ streams::eval_draw, i, 0);
        row_into_matrices(sched, row, eval.features, eval.targets, static_cast<Eigen::Index>(i));
    }

    MlpGradient vel;
    vel.dw1 = Eigen::MatrixXd::Zero(net->w1.rows(), net->w1.cols());
    vel.db1 = Eigen::VectorXd::Zero(net->b1.size());
    vel.dw2 = Eigen::MatrixXd::Zero(net->w2.rows(), net->w2.cols());
    vel.db2 = Eigen::VectorXd::Zero(net->b2.size());

    const int batches_per_epoch =
        static_cast<int>((data.size() + cfg.batch_size - 1) / cfg.batch_size);
    const long long total_steps = static_cast<long long>(cfg.epochs) * batches_per_epoch;
    long long step = 0;

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainResult res;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        CounterRng shuffle(cfg.seed, streams::shuffle, static_cast<std::uint64_t>(epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.next_u64() % i)]);

        for (int bi = 0; bi < batches_per_epoch; ++bi) {
            const std::size_t lo = static_cast<std::size_t>(bi) * cfg.batch_size;
            const std::size_t hi = std::min(lo + static_cast<std::size_t>(cfg.batch_size),
                                            data.size());
            TrainBatch batch;
            batch.features.resize(static_cast<Eigen::Index>(hi - lo), feat);
            batch.targets.resize(static_cast<Eigen::Index>(hi - lo), out);
            for (std::size_t r = lo; r < hi; ++r) {
                const std::size_t i = order[r];
                const TrainRow row = make_train_row(paradigm, sched, data[i], cfg.seed, i,
                                                    static_cast<std::uint64_t>(epoch));
                row_into_matrices(sched, row, batch.features, batch.targets,
                                  static_cast<Eigen::Index>(r - lo));
            }
            const MlpGradient g = mlp_gradient(*net, batch);
            const double lr = cfg.learning_rate *
                              (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
            vel.dw1 = cfg.momentum * vel.dw1 + g.dw1;
            vel.db1 = cfg.momentum * vel.db1 + g.db1;
            vel.dw2 = cfg.momentum * vel.dw2 + g.dw2;
            vel.db2 = cfg.momentum * vel.db2 + g.db2;
            net->w1 -= lr * vel.dw1;
            net->b1 -= lr * vel.db1;
            net->w2 -= lr * vel.dw2;
            net->b2 -= lr * vel.db2;
            ++step;
        }

        const double loss = mlp_batch_loss(*net, eval);
        if (!std::isfinite(loss))
            throw TrainingDivergenceError("mlp training: non-finite loss at epoch " +
                                          std::to_string(epoch));
        res.epoch_loss.push_back(loss);
    }
    res.denoiser = std::move(net);
    return res;
}

}  // namespace detail

// Fits a denoiser by minimizing the v-target MSE over the paradigm's input
// distribution: stochastic blends the label latent with per-example Gaussian
// carriers and conditions on the image latent; deterministic blends with the
// image latent; one-step maps the image latent directly with t fixed to 1.
inline TrainResult train_denoiser(DenoiserKind kind, std::span<const LatentPair> data,
                                  const VarianceSchedule& sched, Paradigm paradigm,
                                  const TrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
    for (const LatentPair& p : data) {
        require_same_shape(p.image, data[0].image, "train_denoiser images");
        require_same_shape(p.label, data[0].label, "train_denoiser labels");
        require_same_shape(p.image, p.label, "train_denoiser image/label");
    }
    if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0))
        throw std::invalid_argument("train_denoiser: bad training configuration");
    switch (kind) {
        case DenoiserKind::linear: return detail::train_linear(data, sched, paradigm, cfg);
        case DenoiserKind::mlp: return detail::train_mlp(data, sched, paradigm, cfg);
        case DenoiserKind::oracle:
            throw std::invalid_argument("train_denoiser: the oracle is not trainable");
    }
    throw std::invalid_argument("train_denoiser: unknown kind");
}

// Parameter file: magic "DNZ1", variant tag, schedule block, dimensions, then
// float64 parameter blocks.
inline void save_denoiser(const std::string& path, const Denoiser& d) {
    BinWriter w(path);
    w.magic("DNZ1");
    const auto write_schedule = [&w](const VarianceSchedule& s) {
        w.u32(static_cast<std::uint32_t>(s.kind));
        w.i32(s.total_steps);
        w.f64(s.beta_start);
        w.f64(s.beta_end);
    };
    if (d.kind() == DenoiserKind::linear) {
        const auto& lin = dynamic_cast<const LinearDenoiser&>(d);
        w.u32(1);
        write_schedule(lin.schedule);
        w.u32(lin.conditioned ? 1 : 0);
        w.i32(lin.state_h);
        w.i32(lin.state_w);
        w.i32(lin.state_c);
        w.i32(lin.buckets);
        w.f64(lin.ridge_lambda);
        for (int b = 0; b < lin.buckets; ++b) {
            const auto& W = lin.weight[static_cast<std::size_t>(b)];
            for (Eigen::Index i = 0; i < W.rows(); ++i)
                for (Eigen::Index j = 0; j < W.cols(); ++j) w.f64(W(i, j));
            const auto& bb = lin.bias[static_cast<std::size_t>(b)];
            for (Eigen::Index i = 0; i < bb.size(); ++i) w.f64(bb(i));
        }
    } else if (d.kind() == DenoiserKind::mlp) {
        const auto& net = dynamic_cast<const MlpDenoiser&>(d);
        w.u32(2);
        write_schedule(net.schedule);
        w.u32(net.conditioned ? 1 : 0);
        w.i32(net.state_h);
        w.i32(net.state_w);
        w.i32(net.state_c);
        w.i32(net.hidden_dim());
        for (Eigen::Index i = 0; i < net.w1.rows(); ++i)
            for (Eigen::Index j = 0; j < net.w1.cols(); ++j) w.f64(net.w1(i, j));
        for (Eigen::Index i = 0; i < net.b1.size(); ++i) w.f64(net.b1(i));
        for (Eigen::Index i = 0; i < net.w2.rows(); ++i)
            for (Eigen::Index j = 0; j < net.w2.cols(); ++j) w.f64(net.w2(i, j));
        for (Eigen::Index i = 0; i < net.b2.size(); ++i) w.f64(net.b2(i));
    } else {
        throw std::invalid_argument("save_denoiser: oracle denoisers are not serializable");
    }
}

inline std::unique_ptr<Denoiser> load_denoiser(const std::string& path) {
    BinReader r(path);
    r.expect_magic("DNZ1");
    const std::uint32_t variant = r.u32();
    const auto read_schedule = [&r]() {
        const std::uint32_t kind = r.u32();
        const int T = r.i32();
        const double bs = r.f64();
        const double be = r.f64();
        return make_schedule(static_cast<ScheduleKind>(kind), T, bs, be);
    };
    if (variant == 1) {
        const VarianceSchedule sched = read_schedule();
        const bool conditioned = r.u32() != 0;
        const int h = r.i32(), w = r.i32(), c = r.i32();
        const int buckets = r.i32();
        const double lambda = r.f64();
        auto lin = std::make_unique<LinearDenoiser>(sched, buckets, conditioned, h, w, c, lambda);
        for (int b = 0; b < buckets; ++b) {
            auto& W = lin->weight[static_cast<std::size_t>(b)];
            for (Eigen::Index i = 0; i < W.rows(); ++i)
                for (Eigen::Index j = 0; j < W.cols(); ++j) W(i, j) = r.f64();
            auto& bb = lin->bias[static_cast<std::size_t>(b)];
            for (Eigen::Index i = 0; i < bb.size(); ++i) bb(i) = r.f64();
        }
        return lin;
    }
    if (variant == 2) {
        const VarianceSchedule sched = read_schedule();
        const bool conditioned = r.u32() != 0;
        const int h = r.i32(), w = r.i32(), c = r.i32();
        const int hidden = r.i32();
        auto net = std::make_unique<MlpDenoiser>(sched, hidden, conditioned, h, w, c);
        for (Eigen::Index i = 0; i < net->w1.rows(); ++i)
            for (Eigen::Index j = 0; j < net->w1.cols(); ++j) net->w1(i, j) = r.f64();
        for (Eigen::Index i = 0; i < net->b1.size(); ++i) net->b1(i) = r.f64();
        for (Eigen::Index i = 0; i < net->w2.rows(); ++i)
            for (Eigen::Index j = 0; j < net->w2.cols(); ++j) net->w2(i, j) = r.f64();
        for (Eigen::Index i = 0; i < net->b2.size(); ++i) net->b2(i) = r.f64();
        return net;
    }
    throw IoError("unknown denoiser variant in " + path);
}

}  // namespace pd
