#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "nn.hpp"
#include "spherical_harmonics.hpp"

namespace escaip {

// ---------------------------------------------------------------------------
// Radial basis

/// Gaussian radial basis with centers evenly spaced in (0, cutoff]. width <= 0 selects
/// the center spacing.
struct RbfConfig {
    std::size_t num_basis = 128;
    double cutoff = 5.0;
    double width = 0.0;

    double sigma() const { return width > 0 ? width : cutoff / static_cast<double>(num_basis); }
    double center(std::size_t i) const { return cutoff * static_cast<double>(i + 1) / static_cast<double>(num_basis); }

    void validate() const {
        if (num_basis < 1) throw ConfigError("rbf num_basis must be at least 1");
        if (!(cutoff > 0)) throw ConfigError("rbf cutoff must be positive");
        if (width < 0) throw ConfigError("rbf width must be nonnegative");
    }
};

/// Smooth cutoff (1 - u)^2 (1 + 2u), u = d / cutoff: value 1 and slope 0 at d = 0, value
/// and slope 0 at the cutoff.
inline double cutoff_envelope(double distance, double cutoff) {
    if (distance >= cutoff) return 0.0;
    const double u = distance / cutoff;
    return (1 - u) * (1 - u) * (1 + 2 * u);
}

/// Gaussians exp(-(d - c_i)^2 / 2 sigma^2) without the envelope.
inline std::vector<double> gaussian_basis(double distance, const RbfConfig& cfg) {
    std::vector<double> out(cfg.num_basis);
    const double s = cfg.sigma();
    for (std::size_t i = 0; i < cfg.num_basis; ++i) {
        const double t = distance - cfg.center(i);
        out[i] = std::exp(-t * t / (2 * s * s));
    }
    return out;
}

inline std::vector<double> rbf_expand(double distance, const RbfConfig& cfg) {
    if (!(distance > 0) || !std::isfinite(distance)) throw ContractError("rbf_expand needs a positive finite distance");
    if (distance >= cfg.cutoff) return std::vector<double>(cfg.num_basis, 0.0);
    auto out = gaussian_basis(distance, cfg);
    const double env = cutoff_envelope(distance, cfg.cutoff);
    for (double& v : out) v *= env;
    return out;
}

// ---------------------------------------------------------------------------
// Bond-orientational order

struct BooResult {
    std::vector<double> values;
    bool isolated = false;
};

/// Steinhardt order parameters for degrees 0..l_max from a set of unit bond directions:
/// sqrt(4 pi / (2l + 1) * sum_m |mean_u Y_lm(d_u)|^2). Empty input gives zeros, flagged.
inline BooResult boo_from_directions(const std::vector<Vec3>& dirs, int l_max) {
    BooResult r;
    r.values.assign(static_cast<std::size_t>(l_max + 1), 0.0);
    if (dirs.empty()) {
        r.isolated = true;
        return r;
    }
    const double inv_n = 1.0 / static_cast<double>(dirs.size());
    for (int l = 0; l <= l_max; ++l) {
        std::vector<double> q(static_cast<std::size_t>(2 * l + 1), 0.0);
        for (const auto& d : dirs) {
            const auto y = real_spherical_harmonics(d, l);
            for (std::size_t m = 0; m < q.size(); ++m) q[m] += y[m];
        }
        double s = 0;
        for (double v : q) s += (v * inv_n) * (v * inv_n);
        r.values[static_cast<std::size_t>(l)] = std::sqrt(4 * std::numbers::pi / (2 * l + 1) * s);
    }
    return r;
}

inline BooResult boo(const NeighborGraph& graph, std::size_t node, int l_max) {
    if (node >= graph.num_atoms) throw ContractError("boo: node index out of range");
    std::vector<Vec3> dirs;
    for (std::size_t s = 0; s < graph.max_neighbors; ++s)
        if (graph.valid(node, s)) dirs.push_back(graph.unit_dirs[graph.slot(node, s)]);
    return boo_from_directions(dirs, l_max);
}

// ---------------------------------------------------------------------------
// Precomputable graph attributes

struct AttributeConfig {
    double cutoff = 5.0;
    std::size_t max_neighbors = 32;
    int l_max = 6;
    RbfConfig rbf;

    bool operator==(const AttributeConfig& o) const {
        return cutoff == o.cutoff && max_neighbors == o.max_neighbors && l_max == o.l_max &&
               rbf.num_basis == o.rbf.num_basis && rbf.cutoff == o.rbf.cutoff && rbf.width == o.rbf.width;
    }
};

/// Everything the network consumes that does not depend on trainable weights.
struct GraphAttributes {
    std::vector<int> species;
    NeighborGraph graph;
    std::vector<double> boo;         // (N, l_max + 1)
    std::vector<double> rbf;         // (N, M, num_basis), zero at masked slots
    std::vector<std::uint8_t> isolated;
    int l_max = 0;
    std::size_t num_basis = 0;

    std::size_t num_atoms() const { return species.size(); }
};

inline GraphAttributes compute_attributes(const AtomicSystem& system, const NeighborGraph& graph,
                                          const AttributeConfig& cfg) {
    if (graph.num_atoms != system.size()) throw ContractError("graph was not built from this system");
    GraphAttributes a;
    a.species = system.species;
    a.graph = graph;
    a.l_max = cfg.l_max;
    a.num_basis = cfg.rbf.num_basis;
    const std::size_t n = system.size(), m = graph.max_neighbors, k = cfg.rbf.num_basis;
    const std::size_t nl = static_cast<std::size_t>(cfg.l_max + 1);
    a.boo.assign(n * nl, 0.0);
    a.rbf.assign(n * m * k, 0.0);
    a.isolated.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const BooResult b = boo(graph, i, cfg.l_max);
        std::copy(b.values.begin(), b.values.end(), a.boo.begin() + static_cast<long>(i * nl));
        a.isolated[i] = b.isolated;
        for (std::size_t s = 0; s < m; ++s) {
            if (!graph.valid(i, s)) continue;
            const auto e = rbf_expand(graph.distances[graph.slot(i, s)], cfg.rbf);
            std::copy(e.begin(), e.end(), a.rbf.begin() + static_cast<long>(graph.slot(i, s) * k));
        }
    }
    return a;
}

inline GraphAttributes compute_attributes(const AtomicSystem& system, const AttributeConfig& cfg) {
    return compute_attributes(system, build_neighbor_graph(system, cfg.cutoff, cfg.max_neighbors), cfg);
}

// ---------------------------------------------------------------------------
// Attribute cache file

namespace detail {

inline void fnv1a(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
}

template <class V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <class V>
V read_pod(std::istream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw DataError("truncated binary file");
    return v;
}
template <class V>
void write_vec(std::ostream& os, const std::vector<V>& v) {
    write_pod<std::uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(V)));
}
template <class V>
std::vector<V> read_vec(std::istream& is) {
    const auto n = read_pod<std::uint64_t>(is);
    if (n > (1ull << 34)) throw DataError("implausible array length in binary file");
    std::vector<V> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(V)));
    if (!is) throw DataError("truncated binary file");
    return v;
}

}  // namespace detail

/// Key identifying a system's attributes: FNV-1a over species, coordinates, cell and
/// every attribute setting.
inline std::uint64_t attribute_key(const AtomicSystem& system, const AttributeConfig& cfg) {
    std::uint64_t h = 1469598103934665603ull;
    for (int z : system.species) detail::fnv1a(h, &z, sizeof z);
    for (const auto& p : system.positions) detail::fnv1a(h, p.data(), sizeof(double) * 3);
    if (system.cell) {
        detail::fnv1a(h, system.cell->lengths.data(), sizeof(double) * 3);
        for (bool b : system.cell->periodic) detail::fnv1a(h, &b, 1);
    }
    detail::fnv1a(h, &cfg.cutoff, sizeof cfg.cutoff);
    detail::fnv1a(h, &cfg.max_neighbors, sizeof cfg.max_neighbors);
    detail::fnv1a(h, &cfg.l_max, sizeof cfg.l_max);
    detail::fnv1a(h, &cfg.rbf.num_basis, sizeof cfg.rbf.num_basis);
    detail::fnv1a(h, &cfg.rbf.cutoff, sizeof cfg.rbf.cutoff);
    detail::fnv1a(h, &cfg.rbf.width, sizeof cfg.rbf.width);
    return h;
}

/// In-memory attribute cache with a binary file form ("ESCFEAT" v1, little-endian
/// native doubles).
class AttributeCache {
   public:
    explicit AttributeCache(AttributeConfig cfg) : cfg_(cfg) {}

    const AttributeConfig& config() const { return cfg_; }
    std::size_t size() const { return entries_.size(); }

    const GraphAttributes& get(const AtomicSystem& system) {
        const auto key = attribute_key(system, cfg_);
        auto it = entries_.find(key);
        if (it == entries_.end()) it = entries_.emplace(key, compute_attributes(system, cfg_)).first;
        return it->second;
    }

    bool contains(const AtomicSystem& system) const { return entries_.contains(attribute_key(system, cfg_)); }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw DataError("cannot write attribute cache " + path);
        os.write("ESCFEAT", 7);
        detail::write_pod<std::uint32_t>(os, 1);
        detail::write_pod<std::uint64_t>(os, entries_.size());
        for (const auto& [key, a] : entries_) {
            detail::write_pod(os, key);
            detail::write_vec(os, a.species);
            detail::write_pod<std::uint64_t>(os, a.graph.max_neighbors);
            detail::write_pod(os, a.graph.cutoff);
            detail::write_vec(os, a.graph.neighbor_index);
            detail::write_vec(os, a.graph.valid_mask);
            detail::write_vec(os, a.graph.unit_dirs);
            detail::write_vec(os, a.graph.distances);
            detail::write_vec(os, a.boo);
            detail::write_vec(os, a.rbf);
            detail::write_vec(os, a.isolated);
            detail::write_pod<std::int32_t>(os, a.l_max);
            detail::write_pod<std::uint64_t>(os, a.num_basis);
        }
    }

    static AttributeCache load(const std::string& path, const AttributeConfig& cfg) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw DataError("cannot read attribute cache " + path);
        char magic[7];
        is.read(magic, 7);
        if (!is || std::memcmp(magic, "ESCFEAT", 7) != 0) throw DataError("not an attribute cache: " + path);
        if (detail::read_pod<std::uint32_t>(is) != 1) throw DataError("unsupported attribute cache version");
        AttributeCache cache(cfg);
        const auto count = detail::read_pod<std::uint64_t>(is);
        for (std::uint64_t e = 0; e < count; ++e) {
            const auto key = detail::read_pod<std::uint64_t>(is);
            GraphAttributes a;
            a.species = detail::read_vec<int>(is);
            a.graph.num_atoms = a.species.size();
            a.graph.max_neighbors = detail::read_pod<std::uint64_t>(is);
            a.graph.cutoff = detail::read_pod<double>(is);
            a.graph.neighbor_index = detail::read_vec<long>(is);
            a.graph.valid_mask = detail::read_vec<std::uint8_t>(is);
            a.graph.unit_dirs = detail::read_vec<Vec3>(is);
            a.graph.distances = detail::read_vec<double>(is);
            a.boo = detail::read_vec<double>(is);
            a.rbf = detail::read_vec<double>(is);
            a.isolated = detail::read_vec<std::uint8_t>(is);
            a.l_max = detail::read_pod<std::int32_t>(is);
            a.num_basis = detail::read_pod<std::uint64_t>(is);
            cache.entries_.emplace(key, std::move(a));
        }
        return cache;
    }

   private:
    AttributeConfig cfg_;
    std::map<std::uint64_t, GraphAttributes> entries_;
};

// ---------------------------------------------------------------------------
// Input block: learned embeddings of the attributes

template <class T>
struct FeatureSet {
    Var<T> node;   // (N, node_width)
    Var<T> edge;   // (N, M, edge_width), zero at masked slots
};

struct InputBlock {
    std::size_t species_table = 0;
    nn::FFN boo_embed;
    nn::FFN node_ffn;
    nn::FFN edge_ffn;
    int max_z = 0;

    template <class T>
    static InputBlock create(ParamStore<T>& store, int max_z, int l_max, std::size_t num_basis,
                             std::size_t node_width, std::size_t edge_width, std::mt19937_64& rng) {
        InputBlock b;
        b.max_z = max_z;
        Tensor<T> table(Shape{static_cast<std::size_t>(max_z + 1), node_width});
        std::normal_distribution<double> normal(0.0, 1.0);
        for (auto& v : table.values()) v = static_cast<T>(normal(rng));
        b.species_table = store.add("input.species_embedding", "embedding", std::move(table));
        const auto nl = static_cast<std::size_t>(l_max + 1);
        b.boo_embed = nn::FFN::create<T>(store, "input.boo_embed", "embedding", nl, node_width, node_width, rng);
        b.node_ffn = nn::FFN::create<T>(store, "input.node_ffn", "embedding", 2 * node_width, node_width, node_width, rng);
        b.edge_ffn = nn::FFN::create<T>(store, "input.edge_ffn", "embedding", num_basis, edge_width, edge_width, rng);
        return b;
    }

    static std::size_t count(int max_z, int l_max, std::size_t num_basis, std::size_t node_width,
                             std::size_t edge_width) {
        const auto nl = static_cast<std::size_t>(l_max + 1);
        return static_cast<std::size_t>(max_z + 1) * node_width + nn::FFN::count(nl, node_width, node_width) +
               nn::FFN::count(2 * node_width, node_width, node_width) +
               nn::FFN::count(num_basis, edge_width, edge_width);
    }

    /// node = FFN(embed(Z) ++ FFN(BOO)); edge = FFN(rbf) with masked slots zeroed.
    template <class T>
    FeatureSet<T> featurize(Tape<T>& tape, const ParamStore<T>& store, const GraphAttributes& attrs) const {
        const std::size_t n = attrs.num_atoms(), m = attrs.graph.max_neighbors;
        std::vector<long> idx(n);
        for (std::size_t i = 0; i < n; ++i) {
            const int z = attrs.species[i];
            if (z < 0 || z > max_z) {
                throw DataError("species " + std::to_string(z) + " outside embedding table (max Z " +
                                std::to_string(max_z) + ")");
            }
            idx[i] = z;
        }
        const auto nl = static_cast<std::size_t>(attrs.l_max + 1);
        Tensor<T> boo_t(Shape{n, nl});
        for (std::size_t i = 0; i < boo_t.size(); ++i) boo_t[i] = static_cast<T>(attrs.boo[i]);
        Tensor<T> rbf_t(Shape{n, m, attrs.num_basis});
        for (std::size_t i = 0; i < rbf_t.size(); ++i) rbf_t[i] = static_cast<T>(attrs.rbf[i]);

        Var<T> species = gather_rows(tape.parameter(store, species_table), std::move(idx));
        Var<T> boo_emb = boo_embed(tape, store, tape.constant(std::move(boo_t)));
        Var<T> node = node_ffn(tape, store, concat<T>({species, boo_emb}));
        Var<T> edge = mask_select(edge_ffn(tape, store, tape.constant(std::move(rbf_t))),
                                  std::span<const std::uint8_t>(attrs.graph.valid_mask));
        return {node, edge};
    }
};

}  // namespace escaip
