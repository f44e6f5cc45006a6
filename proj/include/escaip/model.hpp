#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "featurization.hpp"

namespace escaip {

struct ModelConfig {
    std::size_t num_blocks = 2;
    std::size_t num_heads = 4;
    std::size_t message_size = 32;   // H
    std::size_t node_width = 32;
    std::size_t edge_width = 32;
    std::size_t ffn_width = 64;
    std::size_t readout_width = 16;
    std::size_t head_width = 32;
    std::size_t max_neighbors = 8;   // M
    double cutoff = 2.5;
    int l_max = 6;
    std::size_t rbf_count = 32;
    double rbf_width = 0.0;
    int max_z = 20;
    // Target normalization: E = energy_scale * sum_v e_v + N * energy_shift, F = force_scale * f.
    double energy_shift = 0.0;
    double energy_scale = 1.0;
    double force_scale = 1.0;

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v < 1) throw ConfigError(std::string("model.") + name + " must be at least 1");
        };
        positive(num_blocks, "num_blocks");
        positive(num_heads, "num_heads");
        positive(message_size, "message_size");
        positive(node_width, "node_width");
        positive(edge_width, "edge_width");
        positive(ffn_width, "ffn_width");
        positive(readout_width, "readout_width");
        positive(head_width, "head_width");
        positive(max_neighbors, "max_neighbors");
        positive(rbf_count, "rbf_count");
        if (message_size % num_heads != 0) throw ConfigError("model.message_size must be divisible by num_heads");
        if (!(cutoff > 0)) throw ConfigError("model.cutoff must be positive");
        if (l_max < 0) throw ConfigError("model.l_max must be nonnegative");
        if (max_z < 1) throw ConfigError("model.max_z must be at least 1");
        if (!(energy_scale > 0) || !(force_scale > 0)) throw ConfigError("model scales must be positive");
    }

    AttributeConfig attribute_config() const {
        AttributeConfig a;
        a.cutoff = cutoff;
        a.max_neighbors = max_neighbors;
        a.l_max = l_max;
        a.rbf = RbfConfig{rbf_count, cutoff, rbf_width};
        return a;
    }

    /// 40197 parameters; sized for single-core training.
    static ModelConfig tiny() { return {}; }

    static ModelConfig small_toy() {
        ModelConfig c;
        c.num_blocks = 3;
        c.message_size = 64;
        c.node_width = 64;
        c.edge_width = 64;
        c.ffn_width = 128;
        c.readout_width = 32;
        c.head_width = 64;
        c.max_neighbors = 16;
        c.rbf_count = 64;
        return c;
    }

    static ModelConfig medium_toy() {
        ModelConfig c = small_toy();
        c.num_blocks = 4;
        c.num_heads = 8;
        c.message_size = 128;
        c.ffn_width = 256;
        c.head_width = 128;
        c.max_neighbors = 24;
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"num_blocks", c.num_blocks},       {"num_heads", c.num_heads},
                       {"message_size", c.message_size},   {"node_width", c.node_width},
                       {"edge_width", c.edge_width},       {"ffn_width", c.ffn_width},
                       {"readout_width", c.readout_width}, {"head_width", c.head_width},
                       {"max_neighbors", c.max_neighbors}, {"cutoff", c.cutoff},
                       {"l_max", c.l_max},                 {"rbf_count", c.rbf_count},
                       {"rbf_width", c.rbf_width},         {"max_z", c.max_z},
                       {"energy_shift", c.energy_shift},   {"energy_scale", c.energy_scale},
                       {"force_scale", c.force_scale}};
}

namespace detail {

/// j.get<V>() that also rejects negative or fractional values for unsigned targets.
template <class V>
struct is_vector : std::false_type {};
template <class U>
struct is_vector<std::vector<U>> : std::true_type {};

template <class V>
V json_value(const nlohmann::json& j, const std::string& key) {
    if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
        if (!j.is_number_integer() || (!j.is_number_unsigned() && j.get<std::int64_t>() < 0))
            throw ConfigError(key + ": expected a nonnegative integer");
    } else if constexpr (is_vector<V>::value) {
        if (!j.is_array()) throw ConfigError(key + ": expected an array");
        V out;
        for (const auto& e : j) out.push_back(json_value<typename V::value_type>(e, key));
        return out;
    }
    return j.get<V>();
}

}  // namespace detail

/// Partial update: keys present in j override c. Unknown keys are rejected.
inline void update_from_json(ModelConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("model section must be an object");
    if (j.contains("preset")) {
        const auto name = j.at("preset").get<std::string>();
        if (name == "tiny") c = ModelConfig::tiny();
        else if (name == "small_toy") c = ModelConfig::small_toy();
        else if (name == "medium_toy") c = ModelConfig::medium_toy();
        else throw ConfigError("unknown model preset '" + name + "'");
    }
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "preset") {
            } else if (key == "num_blocks") c.num_blocks = detail::json_value<std::size_t>(v, "model." + key);
            else if (key == "num_heads") c.num_heads = detail::json_value<std::size_t>(v, "model." + key);
            else if (key == "message_size") c.message_size = detail::json_value<std::size_t>(v, "model." + key);
            else if (key == "node_width") c.node_width = detail::json_value<std::size_t>(v, "model." + key);
            else if (key == "edge_width") c.edge_width = detail::json_value<std::size_t>(v, "model." + key);
            else if (key == "ffn_width") c.ffn_width = detail::json_value<std::size_t>(v, "model." + key);
            else if (key == "readout_width") c.readout_width = detail::json_value<std::size_t>(v, "model." + key);
            else if (key == "head_width") c.head_width = detail::json_value<std::size_t>(v, "model." + key);
            else if (key == "max_neighbors") c.max_neighbors = detail::json_value<std::size_t>(v, "model." + key);
            else if (key == "cutoff") c.cutoff = v.get<double>();
            else if (key == "l_max") c.l_max = v.get<int>();
            else if (key == "rbf_count") c.rbf_count = detail::json_value<std::size_t>(v, "model." + key);
            else if (key == "rbf_width") c.rbf_width = v.get<double>();
            else if (key == "max_z") c.max_z = v.get<int>();
            else if (key == "energy_shift") c.energy_shift = v.get<double>();
            else if (key == "energy_scale") c.energy_scale = v.get<double>();
            else if (key == "force_scale") c.force_scale = v.get<double>();
            else throw ConfigError("unknown model key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("model." + key + ": " + e.what());
        }
    }
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    update_from_json(c, j);
}

// ---------------------------------------------------------------------------
// Parameter audit

struct ParameterAudit {
    std::size_t total = 0;
    std::map<std::string, std::size_t> groups;   // embedding, attention, ffn, readout, heads
};

inline ParameterAudit parameter_audit(const ModelConfig& c) {
    using nn::FFN;
    using nn::LayerNorm;
    using nn::Linear;
    ParameterAudit a;
    a.groups["embedding"] = InputBlock::count(c.max_z, c.l_max, c.rbf_count, c.node_width, c.edge_width);
    const std::size_t h = c.message_size;
    a.groups["attention"] = c.num_blocks * (LayerNorm::count(c.node_width) +
                                            Linear::count(2 * c.node_width + c.edge_width, h) +
                                            LayerNorm::count(h) + 4 * Linear::count(h, h));
    a.groups["ffn"] = c.num_blocks * (LayerNorm::count(c.node_width) +
                                      FFN::count(c.node_width + h, c.ffn_width, c.node_width));
    a.groups["readout"] = c.num_blocks * (Linear::count(h, c.readout_width) + Linear::count(c.node_width, c.readout_width));
    const std::size_t ro = c.num_blocks * c.readout_width;
    a.groups["heads"] = FFN::count(ro, c.head_width, 1) + FFN::count(ro, c.head_width, 1) + FFN::count(ro, c.head_width, 3);
    for (const auto& [k, v] : a.groups) a.total += v;
    return a;
}

// ---------------------------------------------------------------------------
// Graph attention block and readouts

template <class T>
struct BlockOutput {
    Var<T> node;       // (N, node_width)
    Var<T> messages;   // (N, M, H), zero at masked slots
};

template <class T>
struct Readout {
    Var<T> edge;   // (N, M, readout_width), zero at masked slots
    Var<T> node;   // (N, readout_width)
};

struct AttentionBlock {
    nn::LayerNorm message_norm;
    nn::Linear message;
    nn::LayerNorm attn_norm;
    nn::Linear query, key, value, out;
    nn::LayerNorm ffn_norm;
    nn::FFN node_ffn;
    nn::Linear edge_readout;
    nn::Linear node_readout;
    std::size_t num_heads = 1;

    template <class T>
    static AttentionBlock create(ParamStore<T>& store, const std::string& name, const ModelConfig& c,
                                 std::mt19937_64& rng) {
        const std::size_t h = c.message_size;
        AttentionBlock b;
        b.num_heads = c.num_heads;
        b.message_norm = nn::LayerNorm::create<T>(store, name + ".message_norm", "attention", c.node_width);
        b.message = nn::Linear::create<T>(store, name + ".message", "attention", 2 * c.node_width + c.edge_width, h, rng);
        b.attn_norm = nn::LayerNorm::create<T>(store, name + ".attn_norm", "attention", h);
        b.query = nn::Linear::create<T>(store, name + ".query", "attention", h, h, rng);
        b.key = nn::Linear::create<T>(store, name + ".key", "attention", h, h, rng);
        b.value = nn::Linear::create<T>(store, name + ".value", "attention", h, h, rng);
        b.out = nn::Linear::create<T>(store, name + ".out", "attention", h, h, rng);
        b.ffn_norm = nn::LayerNorm::create<T>(store, name + ".ffn_norm", "ffn", c.node_width);
        b.node_ffn = nn::FFN::create<T>(store, name + ".node_ffn", "ffn", c.node_width + h, c.ffn_width, c.node_width, rng);
        b.edge_readout = nn::Linear::create<T>(store, name + ".edge_readout", "readout", h, c.readout_width, rng);
        b.node_readout = nn::Linear::create<T>(store, name + ".node_readout", "readout", c.node_width, c.readout_width, rng);
        return b;
    }

    /// Messages over each padded neighborhood, multi-head self-attention with the
    /// neighbor axis as sequence, masked aggregation, then a residual node FFN.
    template <class T>
    BlockOutput<T> forward(Tape<T>& tape, const ParamStore<T>& store, Var<T> node, Var<T> edge,
                           const NeighborGraph& graph) const {
        const std::size_t n = graph.num_atoms, m = graph.max_neighbors;
        const std::size_t h = store[attn_norm.gain].value.size();
        const std::size_t heads = num_heads, dh = h / heads;
        const std::span<const std::uint8_t> valid(graph.valid_mask);

        std::vector<long> src(graph.neighbor_index.size());
        for (std::size_t k = 0; k < src.size(); ++k) src[k] = graph.valid_mask[k] ? graph.neighbor_index[k] : -1;
        Var<T> xn = message_norm(tape, store, node);
        Var<T> x_src = reshape(gather_rows(xn, std::move(src)), Shape{n, m, xn.shape()[1]});
        Var<T> x_dst = broadcast_rows(xn, m);
        Var<T> msg = mask_select(message(tape, store, concat<T>({x_src, x_dst, edge})), valid);

        // Attention within each neighborhood.
        auto split = [&](Var<T> v) {
            return reshape(permute(reshape(v, Shape{n, m, heads, dh}), {0, 2, 1, 3}), Shape{n * heads, m, dh});
        };
        Var<T> a = attn_norm(tape, store, msg);
        Var<T> q = split(query(tape, store, a));
        Var<T> k = split(key(tape, store, a));
        Var<T> v = split(value(tape, store, a));
        Var<T> logits = scale(bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
        std::vector<std::uint8_t> key_mask(n * heads * m * m);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t hd = 0; hd < heads; ++hd)
                for (std::size_t qs = 0; qs < m; ++qs)
                    for (std::size_t ks = 0; ks < m; ++ks)
                        key_mask[((i * heads + hd) * m + qs) * m + ks] = graph.valid_mask[i * m + ks];
        Var<T> weights = masked_softmax(logits, std::span<const std::uint8_t>(key_mask));
        Var<T> attended = bmm(weights, v);
        attended = reshape(permute(reshape(attended, Shape{n, heads, m, dh}), {0, 2, 1, 3}), Shape{n, m, h});
        Var<T> messages = mask_select(add(msg, out(tape, store, attended)), valid);

        // Aggregate to atoms and update nodes.
        Var<T> agg = scale(masked_sum(messages, valid), static_cast<T>(1.0 / std::sqrt(static_cast<double>(m))));
        Var<T> update = node_ffn(tape, store, concat<T>({ffn_norm(tape, store, node), agg}));
        return {add(node, update), messages};
    }

    template <class T>
    Readout<T> readout(Tape<T>& tape, const ParamStore<T>& store, Var<T> messages, Var<T> node,
                       const NeighborGraph& graph) const {
        return {mask_select(edge_readout(tape, store, messages), std::span<const std::uint8_t>(graph.valid_mask)),
                node_readout(tape, store, node)};
    }
};

// ---------------------------------------------------------------------------
// Output block

template <class T>
struct OutputVars {
    Var<T> energy;           // scalar
    Var<T> atom_energy;      // (N, 1), normalized units
    Var<T> magnitude;        // (N, 1)
    Var<T> raw_direction;    // (N, 3), g_v
    Var<T> forces;           // (N, 3)
};

struct OutputBlock {
    static constexpr double kDirectionEps = 1e-8;

    nn::FFN energy;
    nn::FFN magnitude;
    nn::FFN direction;

    template <class T>
    static OutputBlock create(ParamStore<T>& store, const ModelConfig& c, std::mt19937_64& rng) {
        const std::size_t ro = c.num_blocks * c.readout_width;
        return {nn::FFN::create<T>(store, "output.energy", "heads", ro, c.head_width, 1, rng),
                nn::FFN::create<T>(store, "output.magnitude", "heads", ro, c.head_width, 1, rng),
                nn::FFN::create<T>(store, "output.direction", "heads", ro, c.head_width, 3, rng)};
    }

    /// E = scale * sum_v FFN_E(node_v) + N * shift; F_v = m_v * g_v / max(|g_v|, eps) with
    /// g_v = sum_u FFN_d(edge_uv) (elementwise) d_uv.
    template <class T>
    OutputVars<T> forward(Tape<T>& tape, const ParamStore<T>& store, Var<T> node_cat, Var<T> edge_cat,
                          const NeighborGraph& graph, const ModelConfig& c) const {
        const std::size_t n = graph.num_atoms, m = graph.max_neighbors;
        const std::span<const std::uint8_t> valid(graph.valid_mask);
        OutputVars<T> o;
        o.atom_energy = energy(tape, store, node_cat);
        Tensor<T> shift(Shape{}, static_cast<T>(c.energy_shift * static_cast<double>(n)));
        o.energy = add(scale(sum(o.atom_energy), static_cast<T>(c.energy_scale)), tape.constant(std::move(shift)));
        o.magnitude = magnitude(tape, store, node_cat);

        Tensor<T> dirs(Shape{n, m, 3});
        for (std::size_t k = 0; k < n * m; ++k) {
            if (!graph.valid_mask[k]) continue;
            for (int d = 0; d < 3; ++d) dirs[k * 3 + d] = static_cast<T>(graph.unit_dirs[k][static_cast<std::size_t>(d)]);
        }
        Var<T> coeff = direction(tape, store, edge_cat);
        o.raw_direction = masked_sum(mul(coeff, tape.constant(std::move(dirs))), valid);
        Var<T> unit = normalize_rows(o.raw_direction, static_cast<T>(kDirectionEps));
        o.forces = scale(mul_rows(unit, o.magnitude), static_cast<T>(c.force_scale));
        return o;
    }
};

// ---------------------------------------------------------------------------
// Full model

struct Prediction {
    double energy = 0.0;
    std::vector<Vec3> forces;
    std::size_t isolated_atoms = 0;
    std::size_t guarded_directions = 0;
};

template <class T>
struct ForwardVars {
    std::vector<BlockOutput<T>> blocks;
    std::vector<Readout<T>> readouts;
    OutputVars<T> output;
};

template <class T>
class Model {
   public:
    ModelConfig config;
    ParamStore<T> params;
    InputBlock input;
    std::vector<AttentionBlock> blocks;
    OutputBlock output;

    static Model create(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model mdl;
        mdl.config = cfg;
        std::mt19937_64 rng(seed);
        mdl.input = InputBlock::create<T>(mdl.params, cfg.max_z, cfg.l_max, cfg.rbf_count, cfg.node_width,
                                          cfg.edge_width, rng);
        for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
            mdl.blocks.push_back(AttentionBlock::create<T>(mdl.params, "block" + std::to_string(b), cfg, rng));
        }
        mdl.output = OutputBlock::create<T>(mdl.params, cfg, rng);
        return mdl;
    }

    AttributeConfig attribute_config() const { return config.attribute_config(); }

    ForwardVars<T> forward(Tape<T>& tape, const GraphAttributes& attrs) const {
        if (attrs.graph.max_neighbors != config.max_neighbors || attrs.l_max != config.l_max ||
            attrs.num_basis != config.rbf_count) {
            throw ConfigError("attributes were computed with settings that do not match the model");
        }
        ForwardVars<T> fv;
        FeatureSet<T> feats = input.featurize(tape, params, attrs);
        Var<T> node = feats.node;
        std::vector<Var<T>> node_ro, edge_ro;
        for (const auto& blk : blocks) {
            BlockOutput<T> bo = blk.forward(tape, params, node, feats.edge, attrs.graph);
            Readout<T> ro = blk.readout(tape, params, bo.messages, bo.node, attrs.graph);
            node = bo.node;
            node_ro.push_back(ro.node);
            edge_ro.push_back(ro.edge);
            fv.blocks.push_back(bo);
            fv.readouts.push_back(ro);
        }
        fv.output = output.forward(tape, params, concat(node_ro), concat(edge_ro), attrs.graph, config);
        return fv;
    }

    Prediction predict(const GraphAttributes& attrs) const {
        Tape<T> tape;
        auto fv = forward(tape, attrs);
        Prediction p;
        p.energy = static_cast<double>(fv.output.energy.value()[0]);
        const auto& f = fv.output.forces.value();
        p.forces.resize(attrs.num_atoms());
        for (std::size_t i = 0; i < p.forces.size(); ++i)
            for (std::size_t d = 0; d < 3; ++d) p.forces[i][d] = static_cast<double>(f[i * 3 + d]);
        for (auto z : attrs.isolated) p.isolated_atoms += z;
        p.guarded_directions = tape.guarded_norms;
        return p;
    }

    Prediction predict(const AtomicSystem& system) const {
        return predict(compute_attributes(system, attribute_config()));
    }

    /// Copies parameter values from another precision.
    template <class U>
    Model<U> cast() const {
        Model<U> out = Model<U>::create(config, 0);
        for (std::size_t i = 0; i < params.size(); ++i) out.params[i].value = params[i].value.template cast<U>();
        return out;
    }
};

}  // namespace escaip
