#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace oclapo::probe {

struct ProbeConfig {
    int n_pca_components = 16;
    int n_folds = 5;
    int labeled_budget = 0;  // trajectories; 0 = all provided
    int top_m = 0;           // 0 = auto rule (top-1 if K <= 8 else top-2)
    double ridge = 1e-6;
};

struct Pca {
    Eigen::MatrixXd components;          // (n_c, d), orthonormal rows, leading first
    Eigen::VectorXd mean;                // (d)
    Eigen::VectorXd explained_variance;  // (n_c)
    double explained_ratio = 0.0;        // sum of kept eigenvalues / total variance
    bool rank_deficient = false;         // fewer usable directions than requested

    Eigen::MatrixXd project(const Eigen::MatrixXd& x) const {
        return (x.rowwise() - mean.transpose()) * components.transpose();
    }
};

/// Top principal directions of the rows of x. Directions with negligible
/// variance (relative 1e-12 of the leading one) are dropped and flagged.
Pca fit_pca(const Eigen::MatrixXd& x, int n_components);

struct ProbeScore {
    double mse = 0.0;
    bool degenerate = false;  // actions had (near) zero variance
    double pca_explained = 0.0;
};

/// Mean cross-validated test MSE of PCA + ridge(1e-6) regression from rows of
/// `vectors` to rows of `actions`. Folds are contiguous trajectory blocks
/// (all samples of a trajectory share a fold); with fewer trajectories than
/// folds, contiguous sample blocks are used instead.
ProbeScore probe_score(const Eigen::MatrixXd& vectors, const Eigen::MatrixXd& actions,
                       const std::vector<int>& traj_ids, const ProbeConfig& cfg);

/// Deterministic fold assignment per sample; values in [0, n_folds).
std::vector<int> fold_assignment(const std::vector<int>& traj_ids, int n_folds);

struct ProbeReport {
    std::vector<double> scores;         // per slot, lower is better
    std::vector<int> ranking;           // slot indices, ascending score, ties by index
    std::vector<int> selected;          // K*
    std::vector<double> pca_explained;  // per slot
    std::vector<bool> degenerate;       // per slot
    int budget = 0;
    uint64_t seed = 0;
};

/// auto rule: top-1 for K <= 8, top-2 otherwise; top_m > 0 overrides.
ProbeReport select_slots(const std::vector<ProbeScore>& scores, const ProbeConfig& cfg);

std::string report_to_json(const ProbeReport& r, const ProbeConfig& cfg);
ProbeReport report_from_json(const std::string& text);

}  // namespace oclapo::probe
