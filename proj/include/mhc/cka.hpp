#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mhc/model.hpp"

namespace mhc {

// N sampled token-position residuals for one (layer, stream).
struct FeatureSample {
    Eigen::MatrixXf features;  // [N x d]
};

// Residual features for every measurement point: layer 0 (post-expansion)
// through layer L (pre-collapse), one sample matrix per stream.
struct FeatureSet {
    int layers = 0;   // L; measurement points are 0..L inclusive
    int streams = 0;
    int dim = 0;
    int samples = 0;  // N actually collected
    std::vector<std::vector<FeatureSample>> per_layer;  // [L+1][n]
    std::vector<std::string> warnings;
};

struct CkaReport {
    std::vector<Eigen::MatrixXd> within_layer;  // L+1 matrices of [n x n]
    Eigen::MatrixXd inter_layer;                // [(L+1) x (L+1)]
};

// Subtracts each column's mean; requires at least two rows.
Eigen::MatrixXd center_columns(const Eigen::MatrixXd& x);

// Feature-space linear CKA: ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F).
// Throws undefined_similarity_error when either input has zero variance.
double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

// Runs cached forward passes over consecutive windows of a token stream and
// gathers n_samples per-stream residual rows, sampled uniformly without
// replacement over (window, position) and shared across layers/streams.
FeatureSet collect_feature_samples(Model& model, std::span<const int> tokens, int n_samples,
                                   std::uint64_t seed);

// Pairwise CKA between the streams of one layer (symmetric, unit diagonal).
Eigen::MatrixXd stream_cka(const FeatureSet& set, int layer);

// Pairwise CKA across layers with the streams concatenated feature-wise.
Eigen::MatrixXd interlayer_cka(const FeatureSet& set);

CkaReport cka_report(const FeatureSet& set);

}  // namespace mhc
