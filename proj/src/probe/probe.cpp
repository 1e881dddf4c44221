#include "oclapo/probe/probe.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace oclapo::probe {

Pca fit_pca(const Eigen::MatrixXd& x, int n_components) {
    const auto n = x.rows();
    const auto d = x.cols();
    if (n <= n_components)
        throw std::invalid_argument("fit_pca: need more samples than components");
    Pca out;
    out.mean = x.colwise().mean();
    Eigen::MatrixXd c = x.rowwise() - out.mean.transpose();
    Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(n - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    // ascending from Eigen; take from the back
    const double total = std::max(es.eigenvalues().sum(), 0.0);
    const double floor = std::max(es.eigenvalues()(d - 1), 0.0) * 1e-12;

    const int want = std::min<int>(n_components, static_cast<int>(d));
    int kept = 0;
    out.components.resize(want, d);
    out.explained_variance.resize(want);
    for (int i = 0; i < want; ++i) {
        const double ev = es.eigenvalues()(d - 1 - i);
        if (ev <= floor && i > 0) break;
        Eigen::VectorXd v = es.eigenvectors().col(d - 1 - i);
        // deterministic sign: largest-magnitude entry positive
        Eigen::Index imax;
        v.cwiseAbs().maxCoeff(&imax);
        if (v(imax) < 0) v = -v;
        out.components.row(i) = v.transpose();
        out.explained_variance(i) = std::max(ev, 0.0);
        ++kept;
    }
    out.rank_deficient = kept < n_components;
    out.components.conservativeResize(kept, d);
    out.explained_variance.conservativeResize(kept);
    out.explained_ratio = total > 0 ? out.explained_variance.sum() / total : 1.0;
    return out;
}

std::vector<int> fold_assignment(const std::vector<int>& traj_ids, int n_folds) {
    const int n = static_cast<int>(traj_ids.size());
    // distinct trajectories in order of first appearance
    std::vector<int> uniq;
    for (int id : traj_ids)
        if (uniq.empty() || uniq.back() != id) uniq.push_back(id);

    std::vector<int> folds(traj_ids.size());
    if (static_cast<int>(uniq.size()) >= n_folds) {
        // contiguous blocks of whole trajectories
        std::vector<int> traj_fold(uniq.size());
        const int ntr = static_cast<int>(uniq.size());
        for (int i = 0; i < ntr; ++i)
            traj_fold[static_cast<size_t>(i)] =
                std::min(n_folds - 1, static_cast<int>(static_cast<int64_t>(i) * n_folds / ntr));
        int cursor = -1;
        int fold = 0;
        int last_id = traj_ids.empty() ? 0 : traj_ids[0] - 1;
        for (int i = 0; i < n; ++i) {
            if (traj_ids[static_cast<size_t>(i)] != last_id) {
                ++cursor;
                last_id = traj_ids[static_cast<size_t>(i)];
                fold = traj_fold[static_cast<size_t>(cursor)];
            }
            folds[static_cast<size_t>(i)] = fold;
        }
    } else {
        // too few trajectories: contiguous sample blocks
        for (int i = 0; i < n; ++i)
            folds[static_cast<size_t>(i)] =
                std::min(n_folds - 1, static_cast<int>(static_cast<int64_t>(i) * n_folds / n));
    }
    return folds;
}

ProbeScore probe_score(const Eigen::MatrixXd& vectors, const Eigen::MatrixXd& actions,
                       const std::vector<int>& traj_ids, const ProbeConfig& cfg) {
    if (vectors.rows() != actions.rows() ||
        vectors.rows() != static_cast<Eigen::Index>(traj_ids.size()))
        throw std::invalid_argument("probe_score: misaligned inputs");
    if (vectors.rows() < cfg.n_folds) throw std::invalid_argument("probe_score: too few samples");
    if (cfg.n_folds < 2) throw std::invalid_argument("probe_score: n_folds must be >= 2");

    ProbeScore out;
    Eigen::VectorXd var = (actions.rowwise() - actions.colwise().mean())
                              .colwise()
                              .squaredNorm()
                              .transpose() /
                          static_cast<double>(actions.rows());
    out.degenerate = var.maxCoeff() < 1e-12;

    const auto folds = fold_assignment(traj_ids, cfg.n_folds);

    double total = 0;
    double explained = 0;
    for (int f = 0; f < cfg.n_folds; ++f) {
        std::vector<Eigen::Index> tr, te;
        for (Eigen::Index i = 0; i < vectors.rows(); ++i)
            (folds[static_cast<size_t>(i)] == f ? te : tr).push_back(i);
        if (te.empty() || tr.empty())
            throw std::runtime_error("probe_score: empty fold " + std::to_string(f));

        Eigen::MatrixXd xtr(static_cast<Eigen::Index>(tr.size()), vectors.cols());
        Eigen::MatrixXd ytr(static_cast<Eigen::Index>(tr.size()), actions.cols());
        for (size_t i = 0; i < tr.size(); ++i) {
            xtr.row(static_cast<Eigen::Index>(i)) = vectors.row(tr[i]);
            ytr.row(static_cast<Eigen::Index>(i)) = actions.row(tr[i]);
        }
        Eigen::MatrixXd xte(static_cast<Eigen::Index>(te.size()), vectors.cols());
        Eigen::MatrixXd yte(static_cast<Eigen::Index>(te.size()), actions.cols());
        for (size_t i = 0; i < te.size(); ++i) {
            xte.row(static_cast<Eigen::Index>(i)) = vectors.row(te[i]);
            yte.row(static_cast<Eigen::Index>(i)) = actions.row(te[i]);
        }

        const int ncomp =
            std::min<int>(cfg.n_pca_components, static_cast<int>(xtr.rows()) - 1);
        Pca pca = fit_pca(xtr, std::max(1, ncomp));
        explained += pca.explained_ratio;

        // ridge regression with intercept on PCA projections
        Eigen::MatrixXd ztr = pca.project(xtr);
        Eigen::MatrixXd zte = pca.project(xte);
        Eigen::MatrixXd ztr1(ztr.rows(), ztr.cols() + 1);
        ztr1 << ztr, Eigen::VectorXd::Ones(ztr.rows());
        Eigen::MatrixXd zte1(zte.rows(), zte.cols() + 1);
        zte1 << zte, Eigen::VectorXd::Ones(zte.rows());

        Eigen::MatrixXd gram = ztr1.transpose() * ztr1;
        gram.diagonal().array() += cfg.ridge;
        Eigen::MatrixXd w = gram.ldlt().solve(ztr1.transpose() * ytr);

        total += (zte1 * w - yte).array().square().mean();
    }
    out.mse = total / cfg.n_folds;
    out.pca_explained = explained / cfg.n_folds;
    return out;
}

ProbeReport select_slots(const std::vector<ProbeScore>& scores, const ProbeConfig& cfg) {
    const int K = static_cast<int>(scores.size());
    if (K < 1) throw std::invalid_argument("select_slots: no scores");
    ProbeReport r;
    r.budget = cfg.labeled_budget;
    for (const auto& s : scores) {
        r.scores.push_back(s.mse);
        r.pca_explained.push_back(s.pca_explained);
        r.degenerate.push_back(s.degenerate);
    }
    r.ranking.resize(static_cast<size_t>(K));
    std::iota(r.ranking.begin(), r.ranking.end(), 0);
    std::stable_sort(r.ranking.begin(), r.ranking.end(),
                     [&](int a, int b) { return r.scores[static_cast<size_t>(a)] <
                                                r.scores[static_cast<size_t>(b)]; });
    int m = cfg.top_m > 0 ? cfg.top_m : (K <= 8 ? 1 : 2);
    m = std::min(m, K);
    r.selected.assign(r.ranking.begin(), r.ranking.begin() + m);
    std::sort(r.selected.begin(), r.selected.end());
    return r;
}

std::string report_to_json(const ProbeReport& r, const ProbeConfig& cfg) {
    nlohmann::json j;
    j["scores"] = r.scores;
    j["ranking"] = r.ranking;
    j["selected"] = r.selected;
    j["pca_explained"] = r.pca_explained;
    std::vector<int> deg(r.degenerate.begin(), r.degenerate.end());
    j["degenerate"] = deg;
    j["budget"] = r.budget;
    j["seed"] = r.seed;
    j["config"] = {{"n_pca_components", cfg.n_pca_components},
                   {"n_folds", cfg.n_folds},
                   {"labeled_budget", cfg.labeled_budget},
                   {"top_m", cfg.top_m},
                   {"ridge", cfg.ridge}};
    return j.dump(2);
}

ProbeReport report_from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    ProbeReport r;
    r.scores = j.at("scores").get<std::vector<double>>();
    r.ranking = j.at("ranking").get<std::vector<int>>();
    r.selected = j.at("selected").get<std::vector<int>>();
    r.pca_explained = j.at("pca_explained").get<std::vector<double>>();
    for (int v : j.at("degenerate").get<std::vector<int>>()) r.degenerate.push_back(v != 0);
    r.budget = j.at("budget").get<int>();
    r.seed = j.at("seed").get<uint64_t>();
    return r;
}

}  // namespace oclapo::probe
