#include "mhc/cka.hpp"

#include <algorithm>

#include "mhc/errors.hpp"
#include "mhc/rng.hpp"

namespace mhc {

Eigen::MatrixXd center_columns(const Eigen::MatrixXd& x) {
    if (x.rows() < 2) throw std::invalid_argument("center_columns: need at least 2 rows");
    return x.rowwise() - x.colwise().mean();
}

double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    if (x.rows() != y.rows()) throw std::invalid_argument("linear_cka: row counts differ");
    const Eigen::MatrixXd xc = center_columns(x);
    const Eigen::MatrixXd yc = center_columns(y);
    const double xx = (xc.transpose() * xc).norm();
    const double yy = (yc.transpose() * yc).norm();
    if (xx == 0.0 || yy == 0.0)
        throw undefined_similarity_error("linear_cka: zero-variance features, similarity undefined");
    const double cross = (yc.transpose() * xc).squaredNorm();
    return cross / (xx * yy);
}

FeatureSet collect_feature_samples(Model& model, std::span<const int> tokens, int n_samples,
                                   std::uint64_t seed) {
    const auto& cfg = model.config();
    const int t = std::min<int>(cfg.context, static_cast<int>(tokens.size()));
    if (t < 1) throw std::invalid_argument("collect_feature_samples: empty token stream");
    const int windows = static_cast<int>(tokens.size()) / t;
    if (windows < 1) throw std::invalid_argument("collect_feature_samples: token stream shorter than one window");

    FeatureSet set;
    set.layers = cfg.layers;
    set.streams = cfg.streams;
    set.dim = cfg.model_dim;

    const std::int64_t universe = static_cast<std::int64_t>(windows) * t;
    std::int64_t n = n_samples;
    if (n > universe) {
        set.warnings.push_back("requested " + std::to_string(n_samples) + " samples but only " +
                               std::to_string(universe) + " positions available; clamped");
        n = universe;
    }
    if (n < 1) throw std::invalid_argument("collect_feature_samples: need at least one sample");
    if (n < cfg.model_dim)
        set.warnings.push_back("sample count " + std::to_string(n) + " is below feature dimension " +
                               std::to_string(cfg.model_dim) + "; CKA estimates will be noisy");
    set.samples = static_cast<int>(n);

    // Partial Fisher-Yates over the (window, position) universe.
    std::vector<std::int64_t> index(static_cast<std::size_t>(universe));
    for (std::int64_t i = 0; i < universe; ++i) index[static_cast<std::size_t>(i)] = i;
    SplitMix64 rng(seed);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto j = i + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(universe - i)));
        std::swap(index[static_cast<std::size_t>(i)], index[static_cast<std::size_t>(j)]);
    }
    std::vector<std::int64_t> picks(index.begin(), index.begin() + static_cast<std::ptrdiff_t>(n));
    std::sort(picks.begin(), picks.end());  // window-major so each cache is built once

    set.per_layer.assign(static_cast<std::size_t>(cfg.layers) + 1,
                         std::vector<FeatureSample>(static_cast<std::size_t>(cfg.streams)));
    for (auto& layer : set.per_layer)
        for (auto& fs : layer) fs.features.resize(n, cfg.model_dim);

    std::int64_t row = 0;
    for (int w = 0; w < windows && row < n; ++w) {
        const std::int64_t lo = static_cast<std::int64_t>(w) * t, hi = lo + t;
        const std::int64_t first = row;
        while (row < n && picks[static_cast<std::size_t>(row)] < hi) ++row;
        if (row == first) continue;
        std::vector<int> window(tokens.begin() + static_cast<std::ptrdiff_t>(w) * t,
                                tokens.begin() + static_cast<std::ptrdiff_t>(w) * t + t);
        auto fwd = model.forward(window, /*want_cache=*/true);
        const auto& cache = *fwd.cache;
        for (std::int64_t r = first; r < row; ++r) {
            const int pos = static_cast<int>(picks[static_cast<std::size_t>(r)] - lo);
            for (int l = 0; l <= cfg.layers; ++l) {
                const auto& res = cache.residuals[static_cast<std::size_t>(l)];
                for (int s = 0; s < cfg.streams; ++s)
                    for (int dcol = 0; dcol < cfg.model_dim; ++dcol)
                        set.per_layer[static_cast<std::size_t>(l)][static_cast<std::size_t>(s)]
                            .features(r, dcol) = res(pos, s, dcol);
            }
        }
    }
    return set;
}

Eigen::MatrixXd stream_cka(const FeatureSet& set, int layer) {
    if (layer < 0 || layer > set.layers)
        throw std::invalid_argument("stream_cka: layer " + std::to_string(layer) + " outside [0, " +
                                    std::to_string(set.layers) + "]");
    const auto& streams = set.per_layer[static_cast<std::size_t>(layer)];
    const int n = set.streams;
    std::vector<Eigen::MatrixXd> centered(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s)
        centered[static_cast<std::size_t>(s)] = center_columns(streams[static_cast<std::size_t>(s)].features.cast<double>());

    Eigen::MatrixXd out(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i; j < n; ++j) {
            const auto& xc = centered[static_cast<std::size_t>(i)];
            const auto& yc = centered[static_cast<std::size_t>(j)];
            const double xx = (xc.transpose() * xc).norm();
            const double yy = (yc.transpose() * yc).norm();
            if (xx == 0.0 || yy == 0.0)
                throw undefined_similarity_error("stream_cka: zero-variance stream at layer " +
                                                 std::to_string(layer));
            const double v = (yc.transpose() * xc).squaredNorm() / (xx * yy);
            out(i, j) = v;
            out(j, i) = v;
        }
    }
    return out;
}

Eigen::MatrixXd interlayer_cka(const FeatureSet& set) {
    const int points = set.layers + 1;
    std::vector<Eigen::MatrixXd> centered(static_cast<std::size_t>(points));
    for (int l = 0; l < points; ++l) {
        Eigen::MatrixXd concat(set.samples, static_cast<Eigen::Index>(set.streams) * set.dim);
        for (int s = 0; s < set.streams; ++s)
            concat.middleCols(static_cast<Eigen::Index>(s) * set.dim, set.dim) =
                set.per_layer[static_cast<std::size_t>(l)][static_cast<std::size_t>(s)].features.cast<double>();
        centered[static_cast<std::size_t>(l)] = center_columns(concat);
    }
    Eigen::MatrixXd out(points, points);
    std::vector<double> self_norm(static_cast<std::size_t>(points));
    for (int l = 0; l < points; ++l) {
        const auto& c = centered[static_cast<std::size_t>(l)];
        self_norm[static_cast<std::size_t>(l)] = (c.transpose() * c).norm();
        if (self_norm[static_cast<std::size_t>(l)] == 0.0)
            throw undefined_similarity_error("interlayer_cka: zero-variance layer " + std::to_string(l));
    }
    for (int i = 0; i < points; ++i) {
        for (int j = i; j < points; ++j) {
            const double v =
                (centered[static_cast<std::size_t>(j)].transpose() * centered[static_cast<std::size_t>(i)])
                    .squaredNorm() /
                (self_norm[static_cast<std::size_t>(i)] * self_norm[static_cast<std::size_t>(j)]);
            out(i, j) = v;
            out(j, i) = v;
        }
    }
    return out;
}

CkaReport cka_report(const FeatureSet& set) {
    CkaReport report;
    report.within_layer.reserve(static_cast<std::size_t>(set.layers) + 1);
    for (int l = 0; l <= set.layers; ++l) report.within_layer.push_back(stream_cka(set, l));
    report.inter_layer = interlayer_cka(set);
    return report;
}

}  // namespace mhc
