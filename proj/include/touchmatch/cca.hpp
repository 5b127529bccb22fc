#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "touchmatch/dataset.hpp"
#include "touchmatch/error.hpp"
#include "touchmatch/io.hpp"
#include "touchmatch/rng.hpp"
#include "touchmatch/tensor.hpp"
#include "touchmatch/world.hpp"

namespace touchmatch {

/// 2x average pooling of a [C, R, R] image, flattened.
inline Eigen::VectorXd pool2x(const Tensor& img) {
  if (img.rank() != 3 || img.dim(1) % 2 != 0 || img.dim(2) % 2 != 0) {
    throw DimensionError("pool2x: expected [C,R,R] with even R, got " + shape_str(img.shape()));
  }
  const std::size_t c = img.dim(0), rows = img.dim(1), cols = img.dim(2);
  const std::size_t hr = rows / 2, hc = cols / 2;
  Eigen::VectorXd out(static_cast<Eigen::Index>(c * hr * hc));
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < hr; ++i)
      for (std::size_t j = 0; j < hc; ++j) {
        const std::size_t base = (k * rows + 2 * i) * cols + 2 * j;
        out[static_cast<Eigen::Index>((k * hr + i) * hc + j)] =
            0.25 * (img[base] + img[base + 1] + img[base + cols] + img[base + cols + 1]);
      }
  return out;
}

inline Eigen::VectorXd featurize(const VisualObs& obs) { return pool2x(obs.image); }

inline Eigen::VectorXd featurize(const TactileObs& obs) {
  const Eigen::VectorXd a = pool2x(obs.finger_a), b = pool2x(obs.finger_b);
  Eigen::VectorXd out(a.size() + b.size());
  out << a, b;
  return out;
}

struct CcaOptions {
  std::size_t pca_dims = 64;
  std::size_t canonical_dims = 16;
  double ridge = 1e-3;
};

/// Linear CCA between a tactile side (x) and a visual side (y).
struct CcaModel {
  Eigen::VectorXd mean_x, mean_y;
  Eigen::MatrixXd pca_x, pca_y;  // [d, p]
  Eigen::MatrixXd u, v;          // [p, C], unit variance on the training data
  Eigen::VectorXd rho;           // descending
  double ridge = 0.0;
  double threshold = 0.0;

  bool fitted() const noexcept { return rho.size() > 0; }
  std::size_t canonical_dims() const noexcept { return static_cast<std::size_t>(rho.size()); }

  Eigen::VectorXd project_x(const Eigen::VectorXd& x) const { return project(x, mean_x, pca_x, u, "tactile"); }
  Eigen::VectorXd project_y(const Eigen::VectorXd& y) const { return project(y, mean_y, pca_y, v, "visual"); }

  /// Bilinear agreement of two canonical projections.
  double score_projected(const Eigen::VectorXd& px, const Eigen::VectorXd& py) const {
    return (rho.array() * px.array() * py.array()).sum();
  }

  double score(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
    return score_projected(project_x(x), project_y(y));
  }

 private:
  Eigen::VectorXd project(const Eigen::VectorXd& f, const Eigen::VectorXd& mean, const Eigen::MatrixXd& pca,
                          const Eigen::MatrixXd& dirs, const char* side) const {
    if (!fitted()) throw InvalidArgument("cca: model is not fitted");
    if (f.size() != mean.size()) {
      throw DimensionError(std::string("cca: ") + side + " feature has " + std::to_string(f.size()) +
                           " dims, model expects " + std::to_string(mean.size()));
    }
    return dirs.transpose() * (pca.transpose() * (f - mean));
  }
};

namespace cca_detail {

/// Covariance of already-centered rows.
inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& centered) {
  return (centered.transpose() * centered) / static_cast<double>(centered.rows() - 1);
}

/// Top-k eigenvectors of a symmetric matrix, ordered by decreasing eigenvalue,
/// each signed so its first non-negligible entry is positive.
inline Eigen::MatrixXd top_eigenvectors(const Eigen::MatrixXd& sym, std::size_t k) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericError("cca: eigendecomposition failed");
  const Eigen::Index n = sym.rows();
  Eigen::MatrixXd out(n, static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < k; ++i) out.col(static_cast<Eigen::Index>(i)) = es.eigenvectors().col(n - 1 - static_cast<Eigen::Index>(i));
  return out;
}

inline void fix_sign(Eigen::MatrixXd& left, Eigen::MatrixXd& right) {
  for (Eigen::Index c = 0; c < left.cols(); ++c) {
    for (Eigen::Index r = 0; r < left.rows(); ++r) {
      if (std::abs(left(r, c)) > 1e-12) {
        if (left(r, c) < 0.0) {
          left.col(c) *= -1.0;
          right.col(c) *= -1.0;
        }
        break;
      }
    }
  }
}

/// (S + ridge I)^{-1/2}; fails when the regularized matrix is still singular.
inline Eigen::MatrixXd inverse_sqrt(const Eigen::MatrixXd& s, double ridge, const char* side) {
  const Eigen::MatrixXd reg = s + ridge * Eigen::MatrixXd::Identity(s.rows(), s.cols());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(reg);
  if (es.info() != Eigen::Success) throw NumericError(std::string("cca: eigendecomposition failed on ") + side);
  const Eigen::VectorXd ev = es.eigenvalues();
  const double hi = ev.maxCoeff(), lo = ev.minCoeff();
  if (!(lo > 1e-12 * std::max(hi, 1.0))) {
    throw NumericError(std::string("cca: ") + side + " covariance is rank deficient beyond ridge " +
                       io::format_double(ridge) + " (condition estimate " +
                       io::format_double(lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity()) + ")");
  }
  return es.eigenvectors() * ev.cwiseInverse().cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace cca_detail

/// Fits CCA on paired rows of x [n, dx] and y [n, dy]. The threshold is left
/// at zero; fit_cca_baseline calibrates it.
inline CcaModel fit_cca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const CcaOptions& opt = {}) {
  using namespace cca_detail;
  const auto n = static_cast<std::size_t>(x.rows());
  if (static_cast<std::size_t>(y.rows()) != n) {
    throw DimensionError("fit_cca: " + std::to_string(n) + " tactile rows vs " + std::to_string(y.rows()) +
                         " visual rows");
  }
  if (opt.canonical_dims < 1 || opt.pca_dims < opt.canonical_dims || n <= opt.pca_dims) {
    throw InvalidArgument("fit_cca: need pairs > p >= C >= 1 (pairs " + std::to_string(n) + ", p " +
                          std::to_string(opt.pca_dims) + ", C " + std::to_string(opt.canonical_dims) + ")");
  }
  if (static_cast<std::size_t>(x.cols()) < opt.pca_dims || static_cast<std::size_t>(y.cols()) < opt.pca_dims) {
    throw InvalidArgument("fit_cca: p = " + std::to_string(opt.pca_dims) + " exceeds feature dimension");
  }
  if (!(opt.ridge >= 0.0) || !std::isfinite(opt.ridge)) throw InvalidArgument("fit_cca: ridge must be >= 0");
  if (!x.allFinite() || !y.allFinite()) throw NumericError("fit_cca: non-finite features");

  CcaModel m;
  m.ridge = opt.ridge;
  m.mean_x = x.colwise().mean().transpose();
  m.mean_y = y.colwise().mean().transpose();
  const Eigen::MatrixXd xc = x.rowwise() - m.mean_x.transpose();
  const Eigen::MatrixXd yc = y.rowwise() - m.mean_y.transpose();
  m.pca_x = top_eigenvectors(covariance(xc), opt.pca_dims);
  m.pca_y = top_eigenvectors(covariance(yc), opt.pca_dims);

  const Eigen::MatrixXd xr = xc * m.pca_x, yr = yc * m.pca_y;
  const double denom = static_cast<double>(n - 1);
  const Eigen::MatrixXd sxx = covariance(xr), syy = covariance(yr);
  const Eigen::MatrixXd sxy = (xr.transpose() * yr) / denom;
  const Eigen::MatrixXd wx = inverse_sqrt(sxx, opt.ridge, "tactile");
  const Eigen::MatrixXd wy = inverse_sqrt(syy, opt.ridge, "visual");

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(wx * sxy * wy, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto c = static_cast<Eigen::Index>(opt.canonical_dims);
  Eigen::MatrixXd left = svd.matrixU().leftCols(c), right = svd.matrixV().leftCols(c);
  fix_sign(left, right);
  m.u = wx * left;
  m.v = wy * right;
  for (Eigen::Index k = 0; k < c; ++k) {
    const double vu = m.u.col(k).dot(sxx * m.u.col(k)), vv = m.v.col(k).dot(syy * m.v.col(k));
    if (!(vu > 0.0) || !(vv > 0.0)) throw NumericError("fit_cca: canonical direction " + std::to_string(k) + " has zero variance");
    m.u.col(k) /= std::sqrt(vu);
    m.v.col(k) /= std::sqrt(vv);
  }
  m.rho = svd.singularValues().head(c).cwiseMax(0.0).cwiseMin(1.0);
  return m;
}

/// Threshold maximizing balanced accuracy of `score >= t` over candidate
/// values equal to the observed scores; ties go to the smallest such value.
inline double best_balanced_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw InvalidArgument("best_balanced_threshold: need equally many scores and labels, at least one");
  }
  std::size_t pos = 0;
  for (int l : labels) pos += (l == 1);
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw DatasetError("best_balanced_threshold: need both positive and negative labels");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Threshold at order[i]: everything from i upward is called positive.
  std::size_t tp = pos, tn = 0;
  double best = -1.0, best_t = scores[order[0]];
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    const double bal = 0.5 * (static_cast<double>(tp) / static_cast<double>(pos) +
                              static_cast<double>(tn) / static_cast<double>(neg));
    if (bal > best) {
      best = bal;
      best_t = t;
    }
    for (; i < order.size() && scores[order[i]] == t; ++i) {
      if (labels[order[i]] == 1) {
        --tp;
      } else {
        ++tn;
      }
    }
  }
  const double bal_none = 0.5 * static_cast<double>(tn) / static_cast<double>(neg);
  if (bal_none > best) best_t = std::nextafter(scores[order.back()], std::numeric_limits<double>::infinity());
  return best_t;
}

/// Leading canonical correlation after each of `n_perm` random row
/// permutations of y, which destroy any pairing.
inline std::vector<double> permutation_null_rho(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                                                const CcaOptions& opt, std::size_t n_perm, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(y.rows()));
  std::vector<double> out;
  out.reserve(n_perm);
  for (std::size_t k = 0; k < n_perm; ++k) {
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Eigen::Index>(i);
    rng.shuffle(perm);
    Eigen::MatrixXd yp(y.rows(), y.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) yp.row(static_cast<Eigen::Index>(i)) = y.row(perm[i]);
    out.push_back(fit_cca(x, yp, opt).rho[0]);
  }
  return out;
}

inline Eigen::MatrixXd feature_rows(const std::vector<Eigen::VectorXd>& rows) {
  if (rows.empty()) throw InvalidArgument("feature_rows: no rows");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return m;
}

/// Fits on the positive pairs, then calibrates the threshold on all pairs.
inline CcaModel fit_cca_baseline(const EpisodeStore& store, const std::vector<PairExample>& pairs,
                                 const CcaOptions& opt = {}) {
  std::vector<Eigen::VectorXd> xs, ys;
  for (const PairExample& p : pairs) {
    if (p.label != 1) continue;
    xs.push_back(featurize(store.episode(p.tactile_episode_id).tactile));
    ys.push_back(featurize(store.episode(p.visual_episode_id).visual));
  }
  if (xs.empty()) throw DatasetError("fit_cca_baseline: no positive pairs");
  CcaModel m = fit_cca(feature_rows(xs), feature_rows(ys), opt);

  std::vector<Eigen::VectorXd> px(store.size()), py(store.size());
  std::vector<char> have(store.size(), 0);
  std::vector<double> scores;
  std::vector<int> labels;
  for (const PairExample& p : pairs) {
    for (std::int64_t id : {p.tactile_episode_id, p.visual_episode_id}) {
      const auto k = static_cast<std::size_t>(id);
      if (have[k]) continue;
      const Episode& ep = store.episode(id);
      px[k] = m.project_x(featurize(ep.tactile));
      py[k] = m.project_y(featurize(ep.visual));
      have[k] = 1;
    }
    scores.push_back(m.score_projected(px[static_cast<std::size_t>(p.tactile_episode_id)],
                                       py[static_cast<std::size_t>(p.visual_episode_id)]));
    labels.push_back(p.label);
  }
  m.threshold = best_balanced_threshold(scores, labels);
  return m;
}

// ---------------------------------------------------------------- persistence

namespace cca_detail {

inline Tensor to_tensor(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return t;
}

inline Tensor to_tensor(const Eigen::VectorXd& v) {
  return Tensor({static_cast<std::size_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

inline Eigen::MatrixXd to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw IoError("cca archive: expected matrix, got " + shape_str(t.shape()));
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t[static_cast<std::size_t>(r * m.cols() + c)];
  return m;
}

inline Eigen::VectorXd to_vector(const Tensor& t) {
  if (t.rank() != 1) throw IoError("cca archive: expected vector, got " + shape_str(t.shape()));
  return Eigen::Map<const Eigen::VectorXd>(t.data().data(), static_cast<Eigen::Index>(t.size()));
}

}  // namespace cca_detail

inline io::TensorArchive to_archive(const CcaModel& m) {
  using cca_detail::to_tensor;
  if (!m.fitted()) throw InvalidArgument("cca: cannot save an unfitted model");
  io::TensorArchive a;
  a.kind = "cca";
  a.attributes = {{"ridge", io::format_double(m.ridge)}, {"threshold", io::format_double(m.threshold)}};
  a.tensors = {{"mean_x", to_tensor(m.mean_x)}, {"mean_y", to_tensor(m.mean_y)}, {"pca_x", to_tensor(m.pca_x)},
               {"pca_y", to_tensor(m.pca_y)},   {"u", to_tensor(m.u)},           {"v", to_tensor(m.v)},
               {"rho", to_tensor(m.rho)}};
  return a;
}

inline CcaModel cca_from_archive(const io::TensorArchive& a) {
  using namespace cca_detail;
  if (a.kind != "cca") throw IoError("archive kind '" + a.kind + "' is not a CCA model");
  CcaModel m;
  m.ridge = io::parse_double(a.attribute("ridge"), "ridge");
  m.threshold = io::parse_double(a.attribute("threshold"), "threshold");
  m.mean_x = to_vector(a.tensor("mean_x"));
  m.mean_y = to_vector(a.tensor("mean_y"));
  m.pca_x = to_matrix(a.tensor("pca_x"));
  m.pca_y = to_matrix(a.tensor("pca_y"));
  m.u = to_matrix(a.tensor("u"));
  m.v = to_matrix(a.tensor("v"));
  m.rho = to_vector(a.tensor("rho"));
  if (m.pca_x.rows() != m.mean_x.size() || m.pca_y.rows() != m.mean_y.size() || m.u.rows() != m.pca_x.cols() ||
      m.v.rows() != m.pca_y.cols() || m.u.cols() != m.rho.size() || m.v.cols() != m.rho.size()) {
    throw IoError("cca archive: inconsistent tensor shapes");
  }
  return m;
}

inline void save_cca(const CcaModel& m, const io::fs::path& header, const io::fs::path& blob) {
  io::save_archive(to_archive(m), header, blob);
}

inline CcaModel load_cca(const io::fs::path& header, const io::fs::path& blob) {
  return cca_from_archive(io::load_archive(header, blob));
}

}  // namespace touchmatch
