#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "data.hpp"
#include "equivariance.hpp"
#include "model.hpp"
#include "parallel.hpp"

namespace escaip {

struct LossWeights {
    double energy = 1.0;   // lambda_E
    double force = 1.0;    // lambda_F

    void validate() const {
        if (energy < 0 || force < 0) throw ConfigError("loss weights must be nonnegative");
        if (energy == 0 && force == 0) throw ConfigError("loss weights must not both be zero");
    }
};

struct TrainConfig {
    LossWeights weights;
    bool smooth_l1 = false;
    double smooth_l1_delta = 0.1;   // eV/A, on per-atom force-error norms
    std::size_t epochs = 200;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    double min_lr = 1e-5;
    double warmup_fraction = 0.02;
    double clip_norm = 10.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t augment_copies = 16;
    bool augment_full_epochs = false;   // false: each epoch sees one rotated copy per sample
    std::uint64_t seed = 0;
    std::size_t equivariance_batches = 4;
    std::size_t equivariance_batch_size = 8;

    void validate() const {
        weights.validate();
        if (batch_size < 1) throw ConfigError("training.batch_size must be at least 1");
        if (!(lr > 0) || min_lr < 0) throw ConfigError("training learning rates must be positive");
        if (warmup_fraction < 0 || warmup_fraction >= 1) throw ConfigError("training.warmup_fraction must be in [0, 1)");
        if (!(clip_norm > 0)) throw ConfigError("training.clip_norm must be positive");
        if (smooth_l1 && !(smooth_l1_delta > 0)) throw ConfigError("training.smooth_l1_delta must be positive");
    }
};

// ---------------------------------------------------------------------------
// Loss

template <class T>
struct LossTerms {
    Var<T> energy;   // |E - E_label| / N
    Var<T> force;    // mean |F - F_label| over atoms and components (or smooth-L1 of norms)
    Var<T> total;
};

/// lambda_E |E - E*| / N + lambda_F mean_{v,a} |F - F*|. The smooth variant replaces the
/// force term with the mean Huber loss of per-atom error norms, which is rotation invariant.
template <class T>
LossTerms<T> loss(Var<T> energy, Var<T> forces, const AtomicSystem& labels, const LossWeights& w,
                  bool smooth_l1 = false, double delta = 0.1) {
    if (!labels.energy || !labels.forces) throw ContractError("loss needs energy and force labels");
    Tape<T>& tape = *energy.tape;
    const std::size_t n = labels.size();
    if (forces.size() != 3 * n) throw DimensionError("loss: force prediction does not match label count");
    Tensor<T> e_label(Shape{}, static_cast<T>(*labels.energy));
    Tensor<T> f_label(Shape{n, 3});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < 3; ++d) f_label[i * 3 + d] = static_cast<T>((*labels.forces)[i][d]);
    LossTerms<T> out;
    out.energy = scale(abs(sub(energy, tape.constant(std::move(e_label)))), static_cast<T>(1.0 / static_cast<double>(n)));
    Var<T> diff = sub(forces, tape.constant(std::move(f_label)));
    out.force = smooth_l1 ? mean(escaip::smooth_l1(row_norms(diff), static_cast<T>(delta))) : mean(abs(diff));
    out.total = add(scale(out.energy, static_cast<T>(w.energy)), scale(out.force, static_cast<T>(w.force)));
    return out;
}

/// Scalar loss of a finished prediction (same formula as the taped version).
inline double loss_value(const Prediction& pred, const AtomicSystem& labels, const LossWeights& w,
                         bool smooth_l1 = false, double delta = 0.1) {
    Tape<double> tape;
    Tensor<double> f(Shape{pred.forces.size(), 3});
    for (std::size_t i = 0; i < pred.forces.size(); ++i)
        for (std::size_t d = 0; d < 3; ++d) f[i * 3 + d] = pred.forces[i][d];
    auto terms = loss(tape.constant(Tensor<double>(Shape{}, pred.energy)), tape.constant(std::move(f)), labels, w,
                      smooth_l1, delta);
    return terms.total.value()[0];
}

// ---------------------------------------------------------------------------
// Augmentation and normalization

/// Each system replicated k times, copy c of sample i rotated by an independent Haar
/// rotation seeded by (seed, i * k + c). Energies are copied unchanged.
inline std::vector<AtomicSystem> augment_rotations(const std::vector<AtomicSystem>& batch, std::size_t k,
                                                   std::uint64_t seed) {
    if (k < 1) throw ContractError("augment_rotations needs k >= 1");
    std::vector<AtomicSystem> out;
    out.reserve(batch.size() * k);
    for (std::size_t i = 0; i < batch.size(); ++i)
        for (std::size_t c = 0; c < k; ++c)
            out.push_back(apply_rotation(batch[i], random_rotation(derive_seed(seed, i * k + c))));
    return out;
}

/// Sets the model's target normalization from training labels.
inline void fit_normalization(ModelConfig& cfg, const std::vector<AtomicSystem>& train) {
    double sum_pa = 0, sum_pa2 = 0, sum_f2 = 0;
    std::size_t ns = 0, nf = 0;
    for (const auto& s : train) {
        if (!s.energy || !s.forces) continue;
        const double pa = *s.energy / static_cast<double>(s.size());
        sum_pa += pa;
        sum_pa2 += pa * pa;
        ++ns;
        for (const auto& f : *s.forces)
            for (double c : f) {
                sum_f2 += c * c;
                ++nf;
            }
    }
    if (ns == 0) throw DataError("no labeled training samples");
    cfg.energy_shift = sum_pa / static_cast<double>(ns);
    const double var = std::max(0.0, sum_pa2 / static_cast<double>(ns) - cfg.energy_shift * cfg.energy_shift);
    cfg.energy_scale = std::sqrt(var) > 1e-6 ? std::sqrt(var) : 1.0;
    const double frms = nf ? std::sqrt(sum_f2 / static_cast<double>(nf)) : 0.0;
    cfg.force_scale = frms > 1e-6 ? frms : 1.0;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
    double energy_mae_per_atom = 0.0;   // eV / atom
    double energy_mae = 0.0;            // eV
    double force_mae = 0.0;             // eV / A, componentwise
    std::size_t samples = 0;
};

template <class T>
EvalReport evaluate(const Model<T>& model, const std::vector<AtomicSystem>& systems) {
    std::vector<Prediction> preds(systems.size());
    parallel_for(systems.size(), [&](std::size_t i) { preds[i] = model.predict(systems[i]); });
    EvalReport r;
    double f_sum = 0;
    std::size_t f_count = 0;
    for (std::size_t i = 0; i < systems.size(); ++i) {
        const auto& s = systems[i];
        if (!s.energy || !s.forces) throw ContractError("evaluate needs labeled systems");
        const double de = std::abs(preds[i].energy - *s.energy);
        r.energy_mae += de;
        r.energy_mae_per_atom += de / static_cast<double>(s.size());
        for (std::size_t v = 0; v < s.size(); ++v)
            for (std::size_t d = 0; d < 3; ++d) {
                f_sum += std::abs(preds[i].forces[v][d] - (*s.forces)[v][d]);
                ++f_count;
            }
    }
    r.samples = systems.size();
    if (r.samples) {
        r.energy_mae /= static_cast<double>(r.samples);
        r.energy_mae_per_atom /= static_cast<double>(r.samples);
    }
    r.force_mae = f_count ? f_sum / static_cast<double>(f_count) : 0.0;
    return r;
}

/// MAE of the predictor that outputs zero force everywhere.
inline double zero_force_mae(const std::vector<AtomicSystem>& systems) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& sys : systems)
        for (const auto& f : *sys.forces)
            for (double c : f) {
                s += std::abs(c);
                ++n;
            }
    return n ? s / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Optimizer state

template <class T>
struct TrainState {
    Model<T> model;
    Gradients<T> adam_m;
    Gradients<T> adam_v;
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    std::uint64_t schedule_origin_step = 0;
    std::uint64_t schedule_origin_epoch = 0;
    Model<T> best;
    double best_val = std::numeric_limits<double>::infinity();

    static TrainState init(Model<T> model) {
        TrainState s;
        s.adam_m = zero_gradients(model.params);
        s.adam_v = zero_gradients(model.params);
        s.best = model;
        s.model = std::move(model);
        return s;
    }
};

template <class T>
Checkpoint<T> state_checkpoint(const TrainState<T>& s) {
    Checkpoint<T> ck = model_checkpoint(s.model);
    ck.step = s.step;
    ck.epoch = s.epoch;
    ck.metadata["train"] = {{"best_val", std::isfinite(s.best_val) ? nlohmann::json(s.best_val) : nlohmann::json(nullptr)},
                            {"schedule_origin_step", s.schedule_origin_step},
                            {"schedule_origin_epoch", s.schedule_origin_epoch}};
    for (std::size_t i = 0; i < s.model.params.size(); ++i) {
        ck.blobs["adam_m/" + s.model.params[i].name] = s.adam_m[i];
        ck.blobs["adam_v/" + s.model.params[i].name] = s.adam_v[i];
    }
    return ck;
}

/// Restores a TrainState; a checkpoint without optimizer moments starts them at zero.
template <class T>
TrainState<T> state_from_checkpoint(const Checkpoint<T>& ck) {
    TrainState<T> s = TrainState<T>::init(model_from_checkpoint(ck));
    s.step = ck.step;
    s.epoch = ck.epoch;
    if (ck.metadata.contains("train")) {
        const auto& t = ck.metadata.at("train");
        if (!t.at("best_val").is_null()) s.best_val = t.at("best_val").template get<double>();
        s.schedule_origin_step = t.at("schedule_origin_step").template get<std::uint64_t>();
        s.schedule_origin_epoch = t.at("schedule_origin_epoch").template get<std::uint64_t>();
    }
    for (std::size_t i = 0; i < s.model.params.size(); ++i) {
        const auto& name = s.model.params[i].name;
        if (auto it = ck.blobs.find("adam_m/" + name); it != ck.blobs.end()) s.adam_m[i] = it->second;
        if (auto it = ck.blobs.find("adam_v/" + name); it != ck.blobs.end()) s.adam_v[i] = it->second;
    }
    return s;
}

struct MetricRow {
    std::uint64_t step = 0;
    double lr = 0.0;
    double train_loss = std::nan("");
    double val_energy_mae = std::nan("");   // eV / atom
    double val_force_mae = std::nan("");    // eV / A
    double equivariance_cosine = std::nan("");
};

inline const char* kMetricHeader = "step,lr,train_loss,val_energy_mae,val_force_mae,equivariance_cosine";

inline std::string format_metric_row(const MetricRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%llu,%.10g,%.10g,%.10g,%.10g,%.10g", static_cast<unsigned long long>(r.step), r.lr,
                  r.train_loss, r.val_energy_mae, r.val_force_mae, r.equivariance_cosine);
    return buf;
}

/// Learning rate at a step: linear warmup then cosine decay to min_lr.
inline double scheduled_lr(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total_steps) {
    const auto warm = static_cast<std::uint64_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps)));
    if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    if (total_steps <= warm) return cfg.lr;
    const double t = std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(total_steps - warm));
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + std::cos(std::numbers::pi * t));
}

/// One Adam update with global-norm clipping. Returns the pre-clip gradient norm.
template <class T>
double adam_step(TrainState<T>& s, const Gradients<T>& grad, const TrainConfig& cfg, double lr) {
    double sq = 0;
    for (const auto& g : grad)
        for (T v : g.values()) sq += static_cast<double>(v) * static_cast<double>(v);
    const double gnorm = std::sqrt(sq);
    const double clip = gnorm > cfg.clip_norm ? cfg.clip_norm / gnorm : 1.0;
    ++s.step;
    const double t = static_cast<double>(s.step - s.schedule_origin_step);
    const double bc1 = 1 - std::pow(cfg.beta1, t), bc2 = 1 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < grad.size(); ++i) {
        T* p = s.model.params[i].value.data();
        T* m = s.adam_m[i].data();
        T* v = s.adam_v[i].data();
        const T* g = grad[i].data();
        for (std::size_t k = 0; k < grad[i].size(); ++k) {
            const double gk = static_cast<double>(g[k]) * clip;
            m[k] = static_cast<T>(cfg.beta1 * m[k] + (1 - cfg.beta1) * gk);
            v[k] = static_cast<T>(cfg.beta2 * v[k] + (1 - cfg.beta2) * gk * gk);
            const double mh = m[k] / bc1, vh = v[k] / bc2;
            p[k] = static_cast<T>(p[k] - lr * mh / (std::sqrt(vh) + cfg.adam_eps));
        }
    }
    return gnorm;
}

/// Loss and parameter gradient for one labeled system.
template <class T>
std::pair<double, Gradients<T>> sample_gradient(const Model<T>& model, const AtomicSystem& labels,
                                                const TrainConfig& cfg) {
    Tape<T> tape;
    auto fv = model.forward(tape, compute_attributes(labels, model.attribute_config()));
    auto terms = loss(fv.output.energy, fv.output.forces, labels, cfg.weights, cfg.smooth_l1, cfg.smooth_l1_delta);
    tape.backward(terms.total);
    return {static_cast<double>(terms.total.value()[0]), tape.gradients(model.params)};
}

template <class T>
MetricRow validation_row(const TrainState<T>& s, const std::vector<AtomicSystem>& val, const TrainConfig& cfg) {
    MetricRow row;
    row.step = s.step;
    if (val.empty()) return row;
    const EvalReport ev = evaluate(s.model, val);
    row.val_energy_mae = ev.energy_mae_per_atom;
    row.val_force_mae = ev.force_mae;
    if (cfg.equivariance_batches > 0) {
        auto rep = equivariance_check([&](const AtomicSystem& x) { return s.model.predict(x).forces; }, val,
                                      cfg.equivariance_batches, cfg.equivariance_batch_size, derive_seed(cfg.seed, 7919));
        row.equivariance_cosine = rep.mean;
    }
    return row;
}

/// Trains until state.epoch == cfg.epochs (or `stop_at`, if earlier), appending one
/// MetricRow per epoch (plus an initial row when starting from epoch 0) and streaming
/// rows to `csv` if given. The schedule always spans cfg.epochs, so stopping early and
/// resuming from a checkpoint reproduces an uninterrupted run. On a non-finite loss the
/// state is rolled back to the start of the failing epoch and NumericalError is thrown.
template <class T>
std::vector<MetricRow> train(TrainState<T>& state, const std::vector<AtomicSystem>& train_set,
                             const std::vector<AtomicSystem>& val_set, const TrainConfig& cfg,
                             std::ostream* csv = nullptr, std::optional<std::uint64_t> stop_at = std::nullopt) {
    cfg.validate();
    if (train_set.empty() && cfg.epochs > state.epoch) throw ContractError("training set is empty");
    std::vector<MetricRow> log;
    auto emit = [&](const MetricRow& r) {
        log.push_back(r);
        if (csv) *csv << format_metric_row(r) << '\n' << std::flush;
    };
    if (state.epoch == 0 && state.step == 0) emit(validation_row(state, val_set, cfg));

    const std::size_t copies = std::max<std::size_t>(1, cfg.augment_copies);
    const std::vector<AtomicSystem> augmented =
        copies > 1 ? augment_rotations(train_set, copies, cfg.seed) : train_set;
    const std::size_t per_epoch = cfg.augment_full_epochs ? augmented.size() : train_set.size();
    const std::size_t steps_per_epoch = (per_epoch + cfg.batch_size - 1) / cfg.batch_size;
    const std::uint64_t schedule_epochs = cfg.epochs > state.schedule_origin_epoch ? cfg.epochs - state.schedule_origin_epoch : 0;
    const std::uint64_t total_steps = schedule_epochs * steps_per_epoch;

    const std::uint64_t last_epoch = stop_at ? std::min<std::uint64_t>(*stop_at, cfg.epochs) : cfg.epochs;
    while (state.epoch < last_epoch) {
        const TrainState<T> last_good = state;
        const std::uint64_t epoch_seed = derive_seed(cfg.seed, 1000003 + state.epoch);
        std::vector<std::size_t> order(per_epoch);
        for (std::size_t i = 0; i < per_epoch; ++i) {
            if (cfg.augment_full_epochs || copies == 1) {
                order[i] = i;
            } else {
                order[i] = i * copies + derive_seed(epoch_seed, i) % copies;
            }
        }
        std::mt19937_64 rng(epoch_seed);
        for (std::size_t i = per_epoch; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

        double epoch_loss = 0;
        double lr = 0;
        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            const std::size_t lo = b * cfg.batch_size, hi = std::min(per_epoch, lo + cfg.batch_size);
            std::vector<std::pair<double, Gradients<T>>> parts(hi - lo);
            parallel_for(hi - lo, [&](std::size_t k) { parts[k] = sample_gradient(state.model, augmented[order[lo + k]], cfg); });
            Gradients<T> grad = zero_gradients(state.model.params);
            double batch_loss = 0;
            const T inv = static_cast<T>(1.0 / static_cast<double>(hi - lo));
            for (const auto& [l, g] : parts) {
                batch_loss += l;
                for (std::size_t i = 0; i < grad.size(); ++i) {
                    T* dst = grad[i].data();
                    const T* src = g[i].data();
                    for (std::size_t k = 0; k < grad[i].size(); ++k) dst[k] += src[k] * inv;
                }
            }
            if (!std::isfinite(batch_loss)) {
                const auto at = state.step;
                state = last_good;
                throw NumericalError("non-finite loss at step " + std::to_string(at) + " (epoch " +
                                     std::to_string(state.epoch) + "); state rolled back to the epoch start");
            }
            epoch_loss += batch_loss;
            lr = scheduled_lr(cfg, state.step - state.schedule_origin_step, total_steps);
            adam_step(state, grad, cfg, lr);
        }
        ++state.epoch;
        MetricRow row = validation_row(state, val_set, cfg);
        row.lr = lr;
        row.train_loss = epoch_loss / static_cast<double>(per_epoch);
        if (!val_set.empty() && row.val_force_mae < state.best_val) {
            state.best_val = row.val_force_mae;
            state.best = state.model;
        }
        emit(row);
    }
    return log;
}

/// Continues training with a new energy coefficient and a restarted learning-rate
/// schedule over `extra_epochs`; optimizer moments carry over.
template <class T>
std::vector<MetricRow> finetune_energy(TrainState<T>& state, const std::vector<AtomicSystem>& train_set,
                                       const std::vector<AtomicSystem>& val_set, TrainConfig cfg, double new_energy_weight,
                                       std::size_t extra_epochs, std::ostream* csv = nullptr) {
    cfg.weights.energy = new_energy_weight;
    cfg.epochs = state.epoch + extra_epochs;
    state.schedule_origin_step = state.step;
    state.schedule_origin_epoch = state.epoch;
    return train(state, train_set, val_set, cfg, csv);
}

}  // namespace escaip
