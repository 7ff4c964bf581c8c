#pragma once

// Optimization loop: AdamW with decoupled weight decay, cosine learning-rate
// decay, per-step EMA shadow weights, checkpointing and evaluation metrics.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "emonext/checkpoint.hpp"
#include "emonext/data.hpp"
#include "emonext/model.hpp"

namespace emonext {

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

template <typename T>
struct OptimState {
    std::vector<std::vector<T>> m, v;  // parallel to the parameter list
    int64_t t = 0;
    AdamWConfig hyper;

    template <typename Params>
    static OptimState init(const Params& params, AdamWConfig hyper = {}) {
        OptimState s;
        s.hyper = hyper;
        for (const auto& [name, p] : params) {
            s.m.emplace_back(p.data().size(), T(0));
            s.v.emplace_back(p.data().size(), T(0));
        }
        return s;
    }
};

// One AdamW update at learning rate lr_t. Weight decay is decoupled:
// p <- p - lr_t * wd * p, applied separately from the moment update.
template <typename T>
void adamw_step(std::vector<std::pair<std::string, Tensor<T>>>& params, OptimState<T>& state,
                double lr_t) {
    if (params.size() != state.m.size())
        throw ContractError("adamw_step: optimizer state does not match parameter list");
    state.t += 1;
    double bc1 = 1.0 - std::pow(state.hyper.beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(state.hyper.beta2, static_cast<double>(state.t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi].second.data();
        const auto& g = params[pi].second.grad();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        if (p.size() != m.size())
            throw ContractError("adamw_step: shape mismatch for parameter '" + params[pi].first + "'");
        for (size_t i = 0; i < p.size(); ++i) {
            double pd = static_cast<double>(p[i]);
            double gd = static_cast<double>(g[i]);
            pd -= lr_t * state.hyper.weight_decay * pd;
            double md = state.hyper.beta1 * static_cast<double>(m[i]) + (1.0 - state.hyper.beta1) * gd;
            double vd = state.hyper.beta2 * static_cast<double>(v[i]) + (1.0 - state.hyper.beta2) * gd * gd;
            m[i] = static_cast<T>(md);
            v[i] = static_cast<T>(vd);
            pd -= lr_t * (md / bc1) / (std::sqrt(vd / bc2) + state.hyper.eps);
            p[i] = static_cast<T>(pd);
        }
    }
}

// min_lr + 0.5 * (base - min) * (1 + cos(pi * step / total))
inline double cosine_lr(int64_t step, int64_t total_steps, double base_lr, double min_lr = 0.0) {
    if (total_steps < 1) throw ContractError("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps)
        throw ContractError("cosine_lr: step " + std::to_string(step) + " outside 0.." +
                            std::to_string(total_steps));
    double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(3.14159265358979323846 * frac));
}

// ---------------------------------------------------------------------------
// EMA shadow weights
// ---------------------------------------------------------------------------

template <typename T>
struct EmaState {
    std::vector<std::vector<T>> shadow;
    double decay = 0.999;

    template <typename Params>
    static EmaState init(const Params& params, double decay = 0.999) {
        EmaState s;
        s.decay = decay;
        for (const auto& [name, p] : params) s.shadow.push_back(p.data());
        return s;
    }

    // shadow <- decay * shadow + (1 - decay) * param
    template <typename Params>
    void update(const Params& params) {
        for (size_t pi = 0; pi < shadow.size(); ++pi) {
            const auto& p = params[pi].second.data();
            auto& sh = shadow[pi];
            for (size_t i = 0; i < sh.size(); ++i)
                sh[i] = static_cast<T>(decay * static_cast<double>(sh[i]) +
                                       (1.0 - decay) * static_cast<double>(p[i]));
        }
    }
};

// Temporarily swaps the EMA shadow into the model parameters.
template <typename T>
class EmaScope {
  public:
    EmaScope(std::vector<std::pair<std::string, Tensor<T>>>& params, const EmaState<T>& ema)
        : params_(params) {
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            backup_.push_back(params_[pi].second.data());
            params_[pi].second.data() = ema.shadow[pi];
        }
    }
    ~EmaScope() {
        for (size_t pi = 0; pi < params_.size(); ++pi)
            params_[pi].second.data() = std::move(backup_[pi]);
    }

  private:
    std::vector<std::pair<std::string, Tensor<T>>>& params_;
    std::vector<std::vector<T>> backup_;
};

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct Metrics {
    int64_t epoch = 0;
    int64_t step = 0;
    double lr = 0;
    double loss_total = 0, loss_ce = 0, loss_sa = 0;
    double train_acc = 0, val_acc = 0;
    double accuracy = 0;
    std::array<std::array<int64_t, kNumClasses>, kNumClasses> confusion{};  // [true][pred]
    std::array<double, kNumClasses> precision{}, recall{};

    int64_t confusion_total() const {
        int64_t t = 0;
        for (const auto& row : confusion)
            for (int64_t v : row) t += v;
        return t;
    }
};

// Deterministic, augmentation-free accuracy/confusion over a split.
template <typename T>
Metrics evaluate(const Model<T>& model, const std::vector<const Sample*>& samples,
                 int64_t batch_size = 64) {
    if (samples.empty()) throw DataError("evaluate: empty split");
    NoGradGuard no_tape;
    Rng rng(0);
    Metrics mt;
    auto batches = make_batches<T>(samples, batch_size, model.config.input_size,
                                   /*training=*/false, /*seed=*/0, /*epoch=*/0);
    for (auto& b : batches) {
        auto out = forward(model, b.images, /*training=*/false, rng);
        int64_t n = out.logits.dim(0), k = out.logits.dim(1);
        for (int64_t i = 0; i < n; ++i) {
            int64_t best = 0;
            for (int64_t j = 1; j < k; ++j)
                if (out.logits.data()[static_cast<size_t>(i * k + j)] >
                    out.logits.data()[static_cast<size_t>(i * k + best)])
                    best = j;
            mt.confusion[static_cast<size_t>(b.labels[static_cast<size_t>(i)])][static_cast<size_t>(best)]++;
        }
    }
    int64_t correct = 0, total = 0;
    for (int c = 0; c < kNumClasses; ++c) {
        correct += mt.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)];
        for (int p = 0; p < kNumClasses; ++p) total += mt.confusion[static_cast<size_t>(c)][static_cast<size_t>(p)];
    }
    mt.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    for (int c = 0; c < kNumClasses; ++c) {
        int64_t row = 0, col = 0;
        for (int p = 0; p < kNumClasses; ++p) {
            row += mt.confusion[static_cast<size_t>(c)][static_cast<size_t>(p)];
            col += mt.confusion[static_cast<size_t>(p)][static_cast<size_t>(c)];
        }
        int64_t tp = mt.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)];
        mt.recall[static_cast<size_t>(c)] = row > 0 ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
        mt.precision[static_cast<size_t>(c)] = col > 0 ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    }
    return mt;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    int64_t epochs = 100;
    int64_t batch_size = 64;
    double lr = 1e-4;
    double min_lr = 0.0;
    double weight_decay = 0.05;
    double ema_decay = 0.999;
    uint64_t seed = 0;
    std::string out_dir;  // when set: metrics.jsonl, best.emnx, last.emnx
};

template <typename T>
struct TrainResult {
    std::vector<Metrics> epochs;
    double best_acc = 0;      // validation accuracy (training accuracy when no
                              // validation rows exist)
    int64_t best_epoch = -1;
};

namespace detail {

template <typename T>
std::vector<CheckpointTensor> collect_state(
    const std::vector<std::pair<std::string, Tensor<T>>>& params, const OptimState<T>& optim,
    const EmaState<T>& ema) {
    std::vector<CheckpointTensor> out;
    auto to_f32 = [](const std::vector<T>& v) {
        std::vector<float> f(v.size());
        for (size_t i = 0; i < v.size(); ++i) f[i] = static_cast<float>(v[i]);
        return f;
    };
    for (const auto& [name, t] : params) out.push_back({name, t.shape(), to_f32(t.data())});
    for (size_t pi = 0; pi < params.size(); ++pi) {
        out.push_back({"optim/m/" + params[pi].first, params[pi].second.shape(), to_f32(optim.m[pi])});
        out.push_back({"optim/v/" + params[pi].first, params[pi].second.shape(), to_f32(optim.v[pi])});
    }
    for (size_t pi = 0; pi < params.size(); ++pi)
        out.push_back({"ema/" + params[pi].first, params[pi].second.shape(), to_f32(ema.shadow[pi])});
    return out;
}

inline nlohmann::json metrics_json(const Metrics& m) {
    std::vector<int64_t> conf;
    for (const auto& row : m.confusion)
        for (int64_t v : row) conf.push_back(v);
    return nlohmann::json{{"epoch", m.epoch},       {"step", m.step},
                          {"lr", m.lr},             {"loss_total", m.loss_total},
                          {"loss_ce", m.loss_ce},   {"loss_sa", m.loss_sa},
                          {"train_acc", m.train_acc}, {"val_acc", m.val_acc},
                          {"confusion", conf}};
}

}  // namespace detail

template <typename T>
TrainResult<T> train(Model<T>& model, const Dataset& dataset, const TrainConfig& tc) {
    auto train_split = dataset.split(Split::Train);
    if (train_split.empty()) throw DataError("train: empty training split");
    auto val_split = dataset.split(Split::Validation);

    auto params = model.named_params();
    AdamWConfig hyper;
    hyper.lr = tc.lr;
    hyper.weight_decay = tc.weight_decay;
    auto optim = OptimState<T>::init(params, hyper);
    auto ema = EmaState<T>::init(params, tc.ema_decay);

    int64_t steps_per_epoch =
        (static_cast<int64_t>(train_split.size()) + tc.batch_size - 1) / tc.batch_size;
    int64_t total_steps = steps_per_epoch * tc.epochs;

    std::ofstream metrics_out;
    if (!tc.out_dir.empty()) {
        std::filesystem::create_directories(tc.out_dir);
        metrics_out.open(tc.out_dir + "/metrics.jsonl", std::ios::trunc);
        if (!metrics_out) throw DataError("cannot write metrics to " + tc.out_dir);
    }

    TrainResult<T> result;
    int64_t global_step = 0;
    for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
        auto batches = make_batches<T>(train_split, tc.batch_size, model.config.input_size,
                                       /*training=*/true, tc.seed, static_cast<uint64_t>(epoch));
        double sum_total = 0, sum_ce = 0, sum_sa = 0;
        double last_lr = 0;
        for (auto& b : batches) {
            Rng step_rng({tc.seed, 0xD209ULL, static_cast<uint64_t>(global_step)});
            auto out = forward(model, b.images, /*training=*/true, step_rng);
            auto loss = total_loss(out.logits, b.labels, out.weights, model.config.lambda,
                                   model.config.label_smoothing);
            double lv = static_cast<double>(loss.total.item());
            if (!std::isfinite(lv))
                throw NumericError("non-finite loss at step " + std::to_string(global_step));
            sum_total += lv;
            sum_ce += static_cast<double>(loss.ce.item());
            sum_sa += static_cast<double>(loss.sa.item());

            model.zero_grad();
            loss.total.backward();
            last_lr = cosine_lr(global_step, total_steps, tc.lr, tc.min_lr);
            adamw_step(params, optim, last_lr);
            ema.update(params);
            ++global_step;
        }

        Metrics mt;
        mt.epoch = epoch;
        mt.step = global_step;
        mt.lr = last_lr;
        mt.loss_total = sum_total / static_cast<double>(batches.size());
        mt.loss_ce = sum_ce / static_cast<double>(batches.size());
        mt.loss_sa = sum_sa / static_cast<double>(batches.size());

        Metrics train_eval = evaluate(model, train_split, tc.batch_size);
        mt.train_acc = train_eval.accuracy;
        double select_acc;
        if (!val_split.empty()) {
            EmaScope<T> scope(params, ema);
            Metrics val_eval = evaluate(model, val_split, tc.batch_size);
            mt.val_acc = val_eval.accuracy;
            mt.confusion = val_eval.confusion;
            mt.precision = val_eval.precision;
            mt.recall = val_eval.recall;
            select_acc = mt.val_acc;
        } else {
            mt.val_acc = 0.0;
            mt.confusion = train_eval.confusion;
            mt.precision = train_eval.precision;
            mt.recall = train_eval.recall;
            select_acc = mt.train_acc;
        }
        mt.accuracy = select_acc;
        result.epochs.push_back(mt);

        if (metrics_out) metrics_out << detail::metrics_json(mt).dump() << "\n";

        if (!tc.out_dir.empty()) {
            nlohmann::json meta{{"config", config_to_json(model.config)},
                                {"step", global_step},
                                {"epoch", epoch},
                                {"seed", tc.seed},
                                {"val_acc", mt.val_acc},
                                {"train_acc", mt.train_acc}};
            auto state = detail::collect_state(params, optim, ema);
            save_checkpoint(tc.out_dir + "/last.emnx", state, meta);
            if (result.best_epoch < 0 || select_acc > result.best_acc) {
                result.best_acc = select_acc;
                result.best_epoch = epoch;
                save_checkpoint(tc.out_dir + "/best.emnx", state, meta);
            }
        } else if (result.best_epoch < 0 || select_acc > result.best_acc) {
            result.best_acc = select_acc;
            result.best_epoch = epoch;
        }
    }
    if (metrics_out) metrics_out.close();
    return result;
}

// Rebuilds a model (and optionally EMA weights) from a checkpoint file.
template <typename T>
struct TrainState {
    Model<T> model;
    EmaState<T> ema;
    nlohmann::json metadata;
};

template <typename T>
TrainState<T> load_train_state(const std::string& path, bool use_ema) {
    Checkpoint ck = load_checkpoint(path);
    if (!ck.metadata.contains("config"))
        throw FormatError(path + ": checkpoint metadata has no model config");
    ModelConfig cfg = config_from_json(ck.metadata.at("config"));
    Rng rng(0);
    TrainState<T> st{build<T>(cfg, rng), {}, ck.metadata};
    load_params_into(st.model, ck);
    auto params = st.model.named_params();
    st.ema = EmaState<T>::init(params);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const CheckpointTensor* src = ck.find("ema/" + params[pi].first);
        if (src) {
            if (src->shape != params[pi].second.shape())
                throw FormatError("checkpoint tensor 'ema/" + params[pi].first +
                                  "' has shape " + shape_str(src->shape) + ", model expects " +
                                  shape_str(params[pi].second.shape()));
            auto& sh = st.ema.shadow[pi];
            for (size_t i = 0; i < sh.size(); ++i) sh[i] = static_cast<T>(src->data[i]);
        }
    }
    if (use_ema) {
        for (size_t pi = 0; pi < params.size(); ++pi)
            params[pi].second.data() = st.ema.shadow[pi];
    }
    return st;
}

}  // namespace emonext
