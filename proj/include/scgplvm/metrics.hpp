#pragma once

#include "scgplvm/core.hpp"
#include "scgplvm/rng.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

/// @file metrics.hpp
/// Quantitative latent-space evaluation: kNN graph, Leiden community
/// detection (RB-modularity) and the five batch/bio scores — NMI, ARI,
/// cell-type ASW, batch ASW, graph connectivity. Bio and batch averages
/// are reported separately, never combined.

namespace scgplvm::metrics {

struct LatentEmbedding {
    Mat coords; // N x Q posterior means
    Mat vars;   // optional N x Q

    void validate() const {
        if (!coords.allFinite()) throw DomainError("embedding has non-finite coordinates");
    }
};

// ---------------------------------------------------------------------------
// kNN graph
// ---------------------------------------------------------------------------

struct Graph {
    long n = 0;
    std::vector<std::vector<long>> adj; // sorted, self excluded
    std::size_t n_edges = 0;            // undirected count
};

/// Euclidean k-nearest neighbors per node, union-symmetrized; ties broken
/// by smaller index.
inline Graph knn_graph(const LatentEmbedding& emb, int k) {
    const long n = emb.coords.rows();
    if (k < 1 || k >= n) throw DomainError("knn_graph needs 1 <= k < N");
    Graph g;
    g.n = n;
    g.adj.assign(static_cast<std::size_t>(n), {});
    std::vector<std::vector<long>> picks(static_cast<std::size_t>(n));
    threading::parallel_chunks(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi, std::size_t) {
        std::vector<std::pair<double, long>> cand(static_cast<std::size_t>(n - 1));
        for (std::size_t iu = lo; iu < hi; ++iu) {
            const auto i = static_cast<long>(iu);
            std::size_t w = 0;
            for (long j = 0; j < n; ++j) {
                if (j == i) continue;
                cand[w++] = {(emb.coords.row(i) - emb.coords.row(j)).squaredNorm(), j};
            }
            std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
            picks[iu].resize(static_cast<std::size_t>(k));
            for (int t = 0; t < k; ++t) picks[iu][static_cast<std::size_t>(t)] = cand[static_cast<std::size_t>(t)].second;
        }
    });
    for (long i = 0; i < n; ++i)
        for (long j : picks[static_cast<std::size_t>(i)]) {
            g.adj[static_cast<std::size_t>(i)].push_back(j);
            g.adj[static_cast<std::size_t>(j)].push_back(i);
        }
    for (auto& a : g.adj) {
        std::sort(a.begin(), a.end());
        a.erase(std::unique(a.begin(), a.end()), a.end());
        g.n_edges += a.size();
    }
    g.n_edges /= 2;
    return g;
}

// ---------------------------------------------------------------------------
// Leiden clustering (RB modularity)
// ---------------------------------------------------------------------------

namespace detail {

struct WGraph {
    long n = 0;
    std::vector<std::vector<std::pair<long, double>>> adj; // no self entries
    Vec self_loop;   // w_ii stored once; A_ii = 2 w_ii
    Vec strength;    // k_i = sum_j A_ij
    double two_m = 0.0;

    void finalize() {
        strength = Vec::Zero(n);
        for (long i = 0; i < n; ++i) {
            double s = 2.0 * self_loop[i];
            for (const auto& [j, w] : adj[static_cast<std::size_t>(i)]) s += w;
            strength[i] = s;
        }
        two_m = strength.sum();
    }
};

inline WGraph lift(const Graph& g) {
    WGraph w;
    w.n = g.n;
    w.adj.resize(static_cast<std::size_t>(g.n));
    for (long i = 0; i < g.n; ++i)
        for (long j : g.adj[static_cast<std::size_t>(i)])
            w.adj[static_cast<std::size_t>(i)].push_back({j, 1.0});
    w.self_loop = Vec::Zero(g.n);
    w.finalize();
    return w;
}

/// RB modularity: sum_c [ in_c/(2m) - gamma (tot_c/(2m))^2 ].
inline double rb_modularity(const WGraph& g, const std::vector<long>& labels, double gamma) {
    if (g.two_m <= 0.0) return 0.0;
    const long k = 1 + *std::max_element(labels.begin(), labels.end());
    Vec in = Vec::Zero(k), tot = Vec::Zero(k);
    for (long i = 0; i < g.n; ++i) {
        const long c = labels[static_cast<std::size_t>(i)];
        tot[c] += g.strength[i];
        in[c] += 2.0 * g.self_loop[i];
        for (const auto& [j, w] : g.adj[static_cast<std::size_t>(i)])
            if (labels[static_cast<std::size_t>(j)] == c) in[c] += w;
    }
    double q = 0.0;
    for (long c = 0; c < k; ++c) {
        const double t = tot[c] / g.two_m;
        q += in[c] / g.two_m - gamma * t * t;
    }
    return q;
}

/// Queue-based greedy local move; returns whether any node moved.
/// Candidate communities are gathered in sorted order so equal gains
/// resolve to the smallest community id.
inline bool local_move(const WGraph& g, std::vector<long>& labels, double gamma,
                       rng::Engine& rng_engine) {
    if (g.two_m <= 0.0) return false;
    const double m = 0.5 * g.two_m;
    Vec tot = Vec::Zero(g.n); // community strengths (labels live in [0, n))
    for (long i = 0; i < g.n; ++i) tot[labels[static_cast<std::size_t>(i)]] += g.strength[i];

    const auto order = rng::permutation(rng_engine, static_cast<std::size_t>(g.n));
    std::deque<long> queue(order.begin(), order.end());
    std::vector<char> in_queue(static_cast<std::size_t>(g.n), 1);
    std::vector<long> csize(static_cast<std::size_t>(g.n), 0);
    for (long i = 0; i < g.n; ++i) csize[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]++;

    bool any_move = false;
    std::map<long, double> link; // neighbor community -> edge weight (sorted keys)
    while (!queue.empty()) {
        const long v = queue.front();
        queue.pop_front();
        in_queue[static_cast<std::size_t>(v)] = 0;
        const long cur = labels[static_cast<std::size_t>(v)];
        link.clear();
        for (const auto& [j, w] : g.adj[static_cast<std::size_t>(v)])
            link[labels[static_cast<std::size_t>(j)]] += w;

        const double kv = g.strength[v];
        auto gain_of = [&](long c, double kvc) {
            const double tot_c = tot[c] - (c == cur ? kv : 0.0);
            return kvc / m - gamma * kv * tot_c / (2.0 * m * m);
        };
        long best = cur;
        double best_gain = gain_of(cur, link.count(cur) ? link[cur] : 0.0);
        for (const auto& [c, w] : link) {
            if (c == cur) continue;
            const double gn = gain_of(c, w);
            if (gn > best_gain + 1e-12) {
                best = c;
                best_gain = gn;
            }
        }
        // an empty community is always available (gain 0 relative terms)
        if (0.0 > best_gain + 1e-12 && csize[static_cast<std::size_t>(cur)] > 1) {
            for (long c = 0; c < g.n; ++c)
                if (csize[static_cast<std::size_t>(c)] == 0) {
                    best = c;
                    best_gain = 0.0;
                    break;
                }
        }
        if (best != cur) {
            tot[cur] -= kv;
            tot[best] += kv;
            csize[static_cast<std::size_t>(cur)]--;
            csize[static_cast<std::size_t>(best)]++;
            labels[static_cast<std::size_t>(v)] = best;
            any_move = true;
            for (const auto& [j, w] : g.adj[static_cast<std::size_t>(v)]) {
                (void)w;
                if (!in_queue[static_cast<std::size_t>(j)] && labels[static_cast<std::size_t>(j)] != best) {
                    queue.push_back(j);
                    in_queue[static_cast<std::size_t>(j)] = 1;
                }
            }
        }
    }
    return any_move;
}

/// Refinement: within each community of `parent`, greedily merge singleton
/// sub-communities along positive-gain edges (theta -> 0 limit of Leiden's
/// randomized refinement; deterministic given the seeded order).
inline std::vector<long> refine(const WGraph& g, const std::vector<long>& parent, double gamma,
                                rng::Engine& rng_engine) {
    const double m = 0.5 * g.two_m;
    std::vector<long> sub(static_cast<std::size_t>(g.n));
    std::iota(sub.begin(), sub.end(), 0);
    if (g.two_m <= 0.0) return sub;
    Vec tot = g.strength;
    std::vector<long> csize(static_cast<std::size_t>(g.n), 1);

    const auto order = rng::permutation(rng_engine, static_cast<std::size_t>(g.n));
    std::map<long, double> link;
    for (const long v : order) {
        if (csize[static_cast<std::size_t>(sub[static_cast<std::size_t>(v)])] != 1) continue;
        const long cur = sub[static_cast<std::size_t>(v)];
        link.clear();
        for (const auto& [j, w] : g.adj[static_cast<std::size_t>(v)])
            if (parent[static_cast<std::size_t>(j)] == parent[static_cast<std::size_t>(v)])
                link[sub[static_cast<std::size_t>(j)]] += w;
        const double kv = g.strength[v];
        long best = cur;
        double best_gain = 0.0; // staying singleton
        for (const auto& [c, w] : link) {
            if (c == cur) continue;
            const double gn = w / m - gamma * kv * tot[c] / (2.0 * m * m);
            if (gn > best_gain + 1e-12) {
                best = c;
                best_gain = gn;
            }
        }
        if (best != cur) {
            tot[best] += kv;
            tot[cur] -= kv;
            csize[static_cast<std::size_t>(best)] += 1;
            csize[static_cast<std::size_t>(cur)] -= 1;
            sub[static_cast<std::size_t>(v)] = best;
        }
    }
    return sub;
}

inline std::vector<long> compact_labels(const std::vector<long>& labels) {
    std::vector<long> out(labels.size());
    std::map<long, long> remap;
    long next = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto [it, inserted] = remap.emplace(labels[i], next);
        if (inserted) ++next;
        out[i] = it->second;
    }
    return out;
}

struct Aggregated {
    WGraph g;
    std::vector<long> node_map; // old node -> new node
    std::vector<long> parent;   // new node -> parent community label (compacted)
};

inline Aggregated aggregate(const WGraph& g, const std::vector<long>& sub,
                            const std::vector<long>& parent) {
    Aggregated out;
    out.node_map = compact_labels(sub);
    const long nn = 1 + *std::max_element(out.node_map.begin(), out.node_map.end());
    out.g.n = nn;
    out.g.adj.resize(static_cast<std::size_t>(nn));
    out.g.self_loop = Vec::Zero(nn);
    out.parent.assign(static_cast<std::size_t>(nn), 0);
    std::vector<std::map<long, double>> edges(static_cast<std::size_t>(nn));
    for (long i = 0; i < g.n; ++i) {
        const long a = out.node_map[static_cast<std::size_t>(i)];
        out.parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(i)];
        out.g.self_loop[a] += g.self_loop[i];
        for (const auto& [j, w] : g.adj[static_cast<std::size_t>(i)]) {
            if (j < i) continue; // each undirected edge once
            const long b = out.node_map[static_cast<std::size_t>(j)];
            if (a == b) out.g.self_loop[a] += w;
            else edges[static_cast<std::size_t>(std::min(a, b))][std::max(a, b)] += w;
        }
    }
    for (long a = 0; a < nn; ++a)
        for (const auto& [b, w] : edges[static_cast<std::size_t>(a)]) {
            out.g.adj[static_cast<std::size_t>(a)].push_back({b, w});
            out.g.adj[static_cast<std::size_t>(b)].push_back({a, w});
        }
    out.g.finalize();
    return out;
}

} // namespace detail

/// Leiden community detection maximizing RB modularity at `resolution`.
/// Deterministic given seed. When `q_trace` is given, the flattened
/// partition's modularity is appended once per outer iteration (it never
/// decreases).
inline std::vector<long> leiden_cluster(const Graph& graph, double resolution, std::uint64_t seed,
                                        std::vector<double>* q_trace = nullptr) {
    rng::Engine rng_engine(seed);
    detail::WGraph g0 = detail::lift(graph);
    const long n0 = g0.n;
    if (n0 == 0) return {};
    if (g0.two_m <= 0.0) { // edgeless: every node its own community
        std::vector<long> out(static_cast<std::size_t>(n0));
        std::iota(out.begin(), out.end(), 0);
        return out;
    }

    detail::WGraph g = g0;
    std::vector<long> node_map(static_cast<std::size_t>(n0)); // original -> current node
    std::iota(node_map.begin(), node_map.end(), 0);
    std::vector<long> labels(static_cast<std::size_t>(g.n)); // current node -> community
    std::iota(labels.begin(), labels.end(), 0);

    double prev_q = -std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 128; ++iter) {
        detail::local_move(g, labels, resolution, rng_engine);
        std::vector<long> flat(static_cast<std::size_t>(n0));
        for (long i = 0; i < n0; ++i)
            flat[static_cast<std::size_t>(i)] =
                labels[static_cast<std::size_t>(node_map[static_cast<std::size_t>(i)])];
        flat = detail::compact_labels(flat);
        const double q = detail::rb_modularity(g0, flat, resolution);
        if (q + 1e-9 < prev_q)
            throw Error("leiden: modularity decreased across outer iterations");
        prev_q = q;
        if (q_trace) q_trace->push_back(q);

        const std::vector<long> comm = detail::compact_labels(labels);
        const long n_comm = 1 + *std::max_element(comm.begin(), comm.end());
        if (n_comm == g.n) return flat; // every node its own community: stable

        const std::vector<long> sub = detail::refine(g, labels, resolution, rng_engine);
        detail::Aggregated agg = detail::aggregate(g, sub, comm);
        if (agg.g.n == g.n) return flat; // no compression left
        for (long i = 0; i < n0; ++i)
            node_map[static_cast<std::size_t>(i)] =
                agg.node_map[static_cast<std::size_t>(node_map[static_cast<std::size_t>(i)])];
        g = std::move(agg.g);
        labels = std::move(agg.parent);
    }
    std::vector<long> flat(static_cast<std::size_t>(n0));
    for (long i = 0; i < n0; ++i)
        flat[static_cast<std::size_t>(i)] =
            labels[static_cast<std::size_t>(node_map[static_cast<std::size_t>(i)])];
    return detail::compact_labels(flat);
}

/// RB modularity of a labeling on a unit-weight graph (exposed for tests).
inline double rb_modularity(const Graph& g, const std::vector<long>& labels, double resolution) {
    return detail::rb_modularity(detail::lift(g), labels, resolution);
}

// ---------------------------------------------------------------------------
// Label helpers
// ---------------------------------------------------------------------------

inline std::vector<long> encode_labels(const std::vector<std::string>& labels) {
    std::map<std::string, long> ids;
    std::vector<long> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto [it, inserted] = ids.emplace(labels[i], static_cast<long>(ids.size()));
        out[i] = it->second;
    }
    return out;
}

// ---------------------------------------------------------------------------
// NMI / ARI
// ---------------------------------------------------------------------------

namespace detail {

struct Contingency {
    Mat counts; // #T x #C
    Vec row, col;
    double n;
};

inline Contingency contingency(const std::vector<long>& t, const std::vector<long>& c) {
    if (t.size() != c.size()) throw LengthMismatch("label vectors differ in length");
    if (t.empty()) throw LengthMismatch("empty label vectors");
    const std::vector<long> tt = compact_labels(t), cc = compact_labels(c);
    const long kt = 1 + *std::max_element(tt.begin(), tt.end());
    const long kc = 1 + *std::max_element(cc.begin(), cc.end());
    Contingency out;
    out.counts = Mat::Zero(kt, kc);
    for (std::size_t i = 0; i < tt.size(); ++i) out.counts(tt[i], cc[i]) += 1.0;
    out.row = out.counts.rowwise().sum();
    out.col = out.counts.colwise().sum().transpose();
    out.n = static_cast<double>(t.size());
    return out;
}

inline double entropy(const Vec& counts, double n) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < counts.size(); ++i)
        if (counts[i] > 0.0) h -= counts[i] / n * std::log(counts[i] / n);
    return h;
}

} // namespace detail

/// NMI(T,C) = 2 I(T;C) / (H(T) + H(C)), natural logs. Both partitions
/// single-cluster -> 1; exactly one -> 0.
inline double nmi(const std::vector<long>& t, const std::vector<long>& c) {
    const auto ct = detail::contingency(t, c);
    const double ht = detail::entropy(ct.row, ct.n), hc = detail::entropy(ct.col, ct.n);
    if (ht == 0.0 && hc == 0.0) return 1.0;
    if (ht == 0.0 || hc == 0.0) return 0.0;
    double mi = 0.0;
    for (Eigen::Index i = 0; i < ct.counts.rows(); ++i)
        for (Eigen::Index j = 0; j < ct.counts.cols(); ++j) {
            const double nij = ct.counts(i, j);
            if (nij > 0.0) mi += nij / ct.n * std::log(ct.n * nij / (ct.row[i] * ct.col[j]));
        }
    return 2.0 * mi / (ht + hc);
}

inline double nmi(const std::vector<std::string>& t, const std::vector<std::string>& c) {
    return nmi(encode_labels(t), encode_labels(c));
}

/// ARI via the pair-counting contingency form; identical trivial
/// partitions (zero denominator) -> 1.
inline double ari(const std::vector<long>& t, const std::vector<long>& c) {
    const auto ct = detail::contingency(t, c);
    auto choose2 = [](double x) { return 0.5 * x * (x - 1.0); };
    double sum_ij = 0.0;
    for (Eigen::Index i = 0; i < ct.counts.rows(); ++i)
        for (Eigen::Index j = 0; j < ct.counts.cols(); ++j) sum_ij += choose2(ct.counts(i, j));
    double sum_a = 0.0, sum_b = 0.0;
    for (Eigen::Index i = 0; i < ct.row.size(); ++i) sum_a += choose2(ct.row[i]);
    for (Eigen::Index j = 0; j < ct.col.size(); ++j) sum_b += choose2(ct.col[j]);
    const double total = choose2(ct.n);
    const double expected = sum_a * sum_b / total;
    const double maximum = 0.5 * (sum_a + sum_b);
    if (std::abs(maximum - expected) < 1e-12) return 1.0;
    return (sum_ij - expected) / (maximum - expected);
}

inline double ari(const std::vector<std::string>& t, const std::vector<std::string>& c) {
    return ari(encode_labels(t), encode_labels(c));
}

// ---------------------------------------------------------------------------
// Silhouettes
// ---------------------------------------------------------------------------

namespace detail {

/// Per-point silhouette s(n) against `labels` (compact ids). Singleton
/// clusters and coincident points (a = b = 0) get s(n) = 0.
inline Vec silhouette_scores(const Mat& coords, const std::vector<long>& labels) {
    const long n = coords.rows();
    const long k = 1 + *std::max_element(labels.begin(), labels.end());
    std::vector<long> size(static_cast<std::size_t>(k), 0);
    for (long i = 0; i < n; ++i) size[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]++;

    Vec s = Vec::Zero(n);
    threading::parallel_chunks(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi, std::size_t) {
        Vec dsum(k);
        for (std::size_t iu = lo; iu < hi; ++iu) {
            const auto i = static_cast<long>(iu);
            const long ci = labels[iu];
            if (size[static_cast<std::size_t>(ci)] <= 1) { s[i] = 0.0; continue; }
            dsum.setZero();
            for (long j = 0; j < n; ++j) {
                if (j == i) continue;
                dsum[labels[static_cast<std::size_t>(j)]] += (coords.row(i) - coords.row(j)).norm();
            }
            const double a = dsum[ci] / static_cast<double>(size[static_cast<std::size_t>(ci)] - 1);
            double b = std::numeric_limits<double>::infinity();
            for (long c = 0; c < k; ++c) {
                if (c == ci || size[static_cast<std::size_t>(c)] == 0) continue;
                b = std::min(b, dsum[c] / static_cast<double>(size[static_cast<std::size_t>(c)]));
            }
            if (!std::isfinite(b)) { s[i] = 0.0; continue; }
            const double denom = std::max(a, b);
            s[i] = denom > 0.0 ? (b - a) / denom : 0.0;
        }
    });
    return s;
}

} // namespace detail

/// Cell-type ASW: silhouettes against type labels, averaged per type,
/// averaged over types, rescaled to [0, 1].
inline double cell_asw(const LatentEmbedding& emb, const std::vector<std::string>& celltypes) {
    const auto labels = encode_labels(celltypes);
    const long k = labels.empty() ? 0 : 1 + *std::max_element(labels.begin(), labels.end());
    if (k < 2) throw SingleClass("cell_asw needs at least two cell types");
    if (static_cast<long>(labels.size()) != emb.coords.rows())
        throw LengthMismatch("cell_asw: label/coordinate length mismatch");
    const Vec s = detail::silhouette_scores(emb.coords, labels);
    Vec sum = Vec::Zero(k), cnt = Vec::Zero(k);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        sum[labels[i]] += s[static_cast<Eigen::Index>(i)];
        cnt[labels[i]] += 1.0;
    }
    double mean_asw = 0.0;
    for (long c = 0; c < k; ++c) mean_asw += sum[c] / cnt[c];
    mean_asw /= static_cast<double>(k);
    return 0.5 * (1.0 + mean_asw);
}

/// Batch ASW: per cell-type group, silhouette w.r.t. batch labels within
/// the group; score_j = mean(1 - |s|); averaged over groups. Groups with a
/// single batch present are skipped.
inline double batch_asw(const LatentEmbedding& emb, const std::vector<std::string>& batches,
                        const std::vector<std::string>& celltypes) {
    if (batches.size() != celltypes.size() ||
        static_cast<long>(batches.size()) != emb.coords.rows())
        throw LengthMismatch("batch_asw: label/coordinate length mismatch");
    const auto blab = encode_labels(batches);
    const long kb = blab.empty() ? 0 : 1 + *std::max_element(blab.begin(), blab.end());
    if (kb < 2) throw SingleClass("batch_asw needs at least two batches");
    const auto tlab = encode_labels(celltypes);
    const long kt = 1 + *std::max_element(tlab.begin(), tlab.end());

    double total = 0.0;
    long used = 0;
    for (long t = 0; t < kt; ++t) {
        std::vector<Eigen::Index> rows;
        for (std::size_t i = 0; i < tlab.size(); ++i)
            if (tlab[i] == t) rows.push_back(static_cast<Eigen::Index>(i));
        std::vector<long> grp_batch(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) grp_batch[i] = blab[static_cast<std::size_t>(rows[i])];
        const auto compact = detail::compact_labels(grp_batch);
        const long nb = 1 + *std::max_element(compact.begin(), compact.end());
        if (nb < 2) continue;
        Mat sub(static_cast<Eigen::Index>(rows.size()), emb.coords.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = emb.coords.row(rows[i]);
        const Vec s = detail::silhouette_scores(sub, compact);
        total += (1.0 - s.array().abs()).mean();
        ++used;
    }
    if (used == 0) throw SingleClass("batch_asw: no cell type contains two batches");
    return total / static_cast<double>(used);
}

inline double graph_connectivity_from_graph(const Graph& g,
                                            const std::vector<std::string>& celltypes) {
    const auto tlab = encode_labels(celltypes);
    const long kt = 1 + *std::max_element(tlab.begin(), tlab.end());
    double total = 0.0;
    for (long t = 0; t < kt; ++t) {
        std::vector<long> nodes;
        for (std::size_t i = 0; i < tlab.size(); ++i)
            if (tlab[i] == t) nodes.push_back(static_cast<long>(i));
        std::map<long, long> local;
        for (std::size_t i = 0; i < nodes.size(); ++i) local[nodes[i]] = static_cast<long>(i);
        // BFS for largest component of the induced subgraph
        std::vector<char> seen(nodes.size(), 0);
        long best = 0;
        for (std::size_t start = 0; start < nodes.size(); ++start) {
            if (seen[start]) continue;
            long count = 0;
            std::deque<long> q{static_cast<long>(start)};
            seen[start] = 1;
            while (!q.empty()) {
                const long u = q.front();
                q.pop_front();
                ++count;
                for (long nb : g.adj[static_cast<std::size_t>(nodes[static_cast<std::size_t>(u)])]) {
                    const auto it = local.find(nb);
                    if (it == local.end()) continue;
                    if (!seen[static_cast<std::size_t>(it->second)]) {
                        seen[static_cast<std::size_t>(it->second)] = 1;
                        q.push_back(it->second);
                    }
                }
            }
            best = std::max(best, count);
        }
        total += static_cast<double>(best) / static_cast<double>(nodes.size());
    }
    return total / static_cast<double>(kt);
}

/// GC = mean over cell types of |largest connected component| / |type|
/// on the per-type induced subgraphs of the kNN graph.
inline double graph_connectivity(const LatentEmbedding& emb,
                                 const std::vector<std::string>& celltypes, int k) {
    if (static_cast<long>(celltypes.size()) != emb.coords.rows())
        throw LengthMismatch("graph_connectivity: label/coordinate length mismatch");
    const Graph g = knn_graph(emb, k);
    return graph_connectivity_from_graph(g, celltypes);
}

// ---------------------------------------------------------------------------
// Combined evaluation
// ---------------------------------------------------------------------------

struct MetricsReport {
    double nmi = 0.0, ari = 0.0, cell_asw = 0.0, batch_asw = 0.0, graph_connectivity = 0.0;
    double avg_bio = 0.0, avg_batch = 0.0;
    double resolution = 1.0;
    int n_clusters = 0;
    int knn_k = 15;
    std::uint64_t seed = 0;
};

/// Full Appendix-style evaluation: Leiden on the latent kNN graph for
/// NMI/ARI against cell types, plus the ASW and connectivity scores.
/// avg_bio = mean(nmi, ari, cell_asw); avg_batch = mean(batch_asw, gc).
inline MetricsReport evaluate(const LatentEmbedding& emb, const std::vector<std::string>& batches,
                              const std::vector<std::string>& celltypes, int k = 15,
                              double resolution = 1.0, std::uint64_t seed = 0) {
    emb.validate();
    if (celltypes.empty()) throw SingleClass("evaluate needs cell type labels");
    MetricsReport rep;
    rep.resolution = resolution;
    rep.knn_k = k;
    rep.seed = seed;
    const Graph g = knn_graph(emb, k);
    const std::vector<long> pred = leiden_cluster(g, resolution, seed);
    rep.n_clusters = static_cast<int>(1 + *std::max_element(pred.begin(), pred.end()));
    rep.nmi = nmi(encode_labels(celltypes), pred);
    rep.ari = ari(encode_labels(celltypes), pred);
    rep.cell_asw = cell_asw(emb, celltypes);
    rep.batch_asw = batch_asw(emb, batches, celltypes);
    rep.graph_connectivity = graph_connectivity_from_graph(g, celltypes);
    rep.avg_bio = (rep.nmi + rep.ari + rep.cell_asw) / 3.0;
    rep.avg_batch = (rep.batch_asw + rep.graph_connectivity) / 2.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Embedding CSV
// ---------------------------------------------------------------------------

inline void save_embedding_csv(const LatentEmbedding& emb, const std::vector<std::string>& cell_ids,
                               const std::string& path) {
    if (static_cast<long>(cell_ids.size()) != emb.coords.rows())
        throw LengthMismatch("save_embedding_csv: id/coordinate mismatch");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write embedding: " + path);
    out << "cell_id";
    for (Eigen::Index q = 0; q < emb.coords.cols(); ++q) out << ",z" << q;
    out << '\n';
    char buf[64];
    for (Eigen::Index i = 0; i < emb.coords.rows(); ++i) {
        out << cell_ids[static_cast<std::size_t>(i)];
        for (Eigen::Index q = 0; q < emb.coords.cols(); ++q) {
            std::snprintf(buf, sizeof(buf), ",%.17g", emb.coords(i, q));
            out << buf;
        }
        out << '\n';
    }
}

inline LatentEmbedding load_embedding_csv(const std::string& path,
                                          std::vector<std::string>* cell_ids = nullptr) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open embedding: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty embedding file");
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string field;
        std::vector<double> row;
        bool first = true;
        while (std::getline(is, field, ',')) {
            if (first) {
                if (cell_ids) cell_ids->push_back(field);
                first = false;
                continue;
            }
            try {
                row.push_back(std::stod(field));
            } catch (const std::exception&) {
                throw ParseError("unparseable embedding value: '" + field + "'");
            }
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ParseError("embedding file has no data rows");
    LatentEmbedding emb;
    emb.coords.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows[0].size()) throw ParseError("ragged embedding rows");
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            emb.coords(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    return emb;
}

} // namespace scgplvm::metrics
