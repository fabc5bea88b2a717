#pragma once

// Latent-code analysis: PCA over training codes, codes from principal
// coordinates, deformation transport, and a multinomial logistic probe.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dreg/io.hpp"
#include "dreg/model.hpp"

namespace dreg {

struct LatentRecord {
  std::string id;
  std::string label;
  double ef = 0;
  std::vector<double> z;
};

struct PrincipalBasis {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // rows, by decreasing variance
  Eigen::VectorXd stddevs;

  std::size_t dim() const { return std::size_t(mean.size()); }
};

inline Eigen::MatrixXd code_matrix(const std::vector<std::vector<double>>& codes) {
  if (codes.empty()) return {};
  const std::size_t d = codes[0].size();
  Eigen::MatrixXd x(codes.size(), d);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i].size() != d) throw std::invalid_argument("latent codes differ in dimension");
    for (std::size_t j = 0; j < d; ++j) x(Eigen::Index(i), Eigen::Index(j)) = codes[i][j];
  }
  return x;
}

/// PCA of the sample covariance (denominator n-1). Each component is signed so
/// that its largest-magnitude entry is positive.
inline PrincipalBasis fit_pca(const std::vector<std::vector<double>>& codes) {
  if (codes.size() < 2) throw std::invalid_argument("fit_pca: need at least 2 codes, got " + std::to_string(codes.size()));
  const Eigen::MatrixXd x = code_matrix(codes);
  PrincipalBasis b;
  b.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - b.mean.transpose();
  const Eigen::MatrixXd cov = (c.transpose() * c) / double(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("fit_pca: eigendecomposition failed");
  const Eigen::Index d = cov.rows();
  b.components.resize(d, d);
  b.stddevs.resize(d);
  // Eigen sorts eigenvalues ascending.
  for (Eigen::Index k = 0; k < d; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < d; ++i)
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    if (v(arg) < 0) v = -v;
    b.components.row(k) = v.transpose();
    b.stddevs(k) = std::sqrt(std::max(0.0, eig.eigenvalues()(d - 1 - k)));
  }
  return b;
}

/// z = mean + sum_j coords[j] * stddev_j * component_j.
inline std::vector<double> code_at(const PrincipalBasis& b, const std::map<std::size_t, double>& coords) {
  Eigen::VectorXd z = b.mean;
  for (const auto& [j, c] : coords) {
    if (j >= b.dim())
      throw std::out_of_range("code_at: component " + std::to_string(j) + " >= dimension " + std::to_string(b.dim()));
    z += c * b.stddevs(Eigen::Index(j)) * b.components.row(Eigen::Index(j)).transpose();
  }
  return {z.data(), z.data() + z.size()};
}

/// Coordinates of z in standard-deviation units; 0 along zero-variance axes.
inline std::vector<double> project(const PrincipalBasis& b, const std::vector<double>& z) {
  if (z.size() != b.dim()) throw std::invalid_argument("project: code dimension mismatch");
  const Eigen::VectorXd c = b.components * (Eigen::Map<const Eigen::VectorXd>(z.data(), Eigen::Index(z.size())) - b.mean);
  std::vector<double> out(z.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    const double sd = b.stddevs(Eigen::Index(j));
    out[j] = sd > 0 ? c(Eigen::Index(j)) / sd : 0.0;
  }
  return out;
}

inline void save_basis(const PrincipalBasis& b, const std::filesystem::path& dir) {
  ensure_directory(dir);
  const std::size_t d = b.dim();
  Tensor<double> comp(Shape{d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) comp.data[i * d + j] = b.components(Eigen::Index(i), Eigen::Index(j));
  save_drt((dir / "components.drt").string(), comp);
  nlohmann::json j = {{"format", "dreg-pca/1"},
                      {"dim", d},
                      {"mean", std::vector<double>(b.mean.data(), b.mean.data() + d)},
                      {"stddevs", std::vector<double>(b.stddevs.data(), b.stddevs.data() + d)},
                      {"components", "components.drt"}};
  write_text(dir / "basis.json", j.dump(2) + "\n");
}

inline PrincipalBasis load_basis(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(read_text(dir / "basis.json"));
  const auto d = j.at("dim").get<std::size_t>();
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto sd = j.at("stddevs").get<std::vector<double>>();
  const auto comp = load_drt<double>((dir / j.at("components").get<std::string>()).string());
  if (mean.size() != d || sd.size() != d || comp.shape != Shape{d, d})
    throw std::runtime_error((dir / "basis.json").string() + ": inconsistent basis dimensions");
  PrincipalBasis b;
  b.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), Eigen::Index(d));
  b.stddevs = Eigen::Map<const Eigen::VectorXd>(sd.data(), Eigen::Index(d));
  b.components.resize(Eigen::Index(d), Eigen::Index(d));
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) b.components(Eigen::Index(r), Eigen::Index(c)) = comp.data[r * d + c];
  return b;
}

// ---------------------------------------------------------------------------
// Codes and transport
// ---------------------------------------------------------------------------

template <typename Real>
std::vector<double> to_code(const Tensor<Real>& z) {
  return std::vector<double>(z.data.begin(), z.data.end());
}

template <typename Real>
Tensor<Real> from_code(const std::vector<double>& z) {
  Tensor<Real> t(Shape{z.size()});
  for (std::size_t i = 0; i < z.size(); ++i) t.data[i] = Real(z[i]);
  return t;
}

/// Donor pair A's deformation applied to recipient moving image M_B.
template <typename Real>
RegistrationResult<Real> transport(RegistrationModel<Real>& model, const ScalarImage<Real>& fixed_a,
                                   const ScalarImage<Real>& moving_a, const ScalarImage<Real>& moving_b) {
  return model.sample_deformation(moving_b, model.encode(fixed_a, moving_a).mu);
}

/// CSV with header id,class,ef,z1..zd and one row per record.
inline std::string codes_csv(const std::vector<LatentRecord>& records, std::size_t d) {
  std::string out = "id,class,ef";
  for (std::size_t i = 1; i <= d; ++i) out += ",z" + std::to_string(i);
  out += "\n";
  for (const auto& r : records) {
    if (r.z.size() != d) throw std::invalid_argument("codes_csv: record " + r.id + " has wrong code dimension");
    out += r.id + "," + r.label + "," + fmt_double(r.ef);
    for (double v : r.z) out += "," + fmt_double(v);
    out += "\n";
  }
  return out;
}

inline std::vector<LatentRecord> parse_codes_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("id,class,ef", 0) != 0) throw std::runtime_error("codes CSV: bad header");
  const std::size_t d = std::size_t(std::count(line.begin(), line.end(), ',')) - 2;
  std::vector<LatentRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells.size() != d + 3) throw std::runtime_error("codes CSV: row has " + std::to_string(cells.size()) + " cells");
    LatentRecord r{cells[0], cells[1], std::stod(cells[2]), {}};
    for (std::size_t i = 0; i < d; ++i) r.z.push_back(std::stod(cells[3 + i]));
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeConfig {
  std::size_t iterations = 500;
  double learning_rate = 0.5;
  double l2 = 1e-3;
  std::size_t folds = 10;
  std::uint64_t seed = 0;
};

/// Multinomial logistic regression on standardized codes.
struct LinearProbe {
  std::vector<std::string> classes;
  Eigen::VectorXd center, scale;
  Eigen::MatrixXd weights;  // K x (d + 1), last column is the bias

  std::string classify(const std::vector<double>& z) const {
    Eigen::VectorXd x(weights.cols());
    for (Eigen::Index i = 0; i < center.size(); ++i) x(i) = (z[std::size_t(i)] - center(i)) / scale(i);
    x(center.size()) = 1.0;
    Eigen::Index best = 0;
    (weights * x).maxCoeff(&best);
    return classes[std::size_t(best)];
  }
};

inline LinearProbe fit_linear_probe(const std::vector<LatentRecord>& records, const ProbeConfig& cfg = {}) {
  std::map<std::string, std::size_t> count;
  for (const auto& r : records) ++count[r.label];
  if (count.size() < 2) throw std::invalid_argument("fit_linear_probe: need at least 2 classes");
  LinearProbe p;
  for (const auto& [c, n] : count) p.classes.push_back(c);
  std::vector<std::vector<double>> codes;
  for (const auto& r : records) codes.push_back(r.z);
  const Eigen::MatrixXd x0 = code_matrix(codes);
  const Eigen::Index n = x0.rows(), d = x0.cols(), k = Eigen::Index(p.classes.size());
  p.center = x0.colwise().mean().transpose();
  p.scale = ((x0.rowwise() - p.center.transpose()).array().square().colwise().sum() / double(n)).sqrt().transpose();
  for (Eigen::Index j = 0; j < d; ++j)
    if (!(p.scale(j) > 1e-12)) p.scale(j) = 1.0;
  Eigen::MatrixXd x(n, d + 1);
  x.leftCols(d) = (x0.rowwise() - p.center.transpose()).array().rowwise() / p.scale.transpose().array();
  x.col(d).setOnes();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto it = std::find(p.classes.begin(), p.classes.end(), records[std::size_t(i)].label);
    y(i, it - p.classes.begin()) = 1.0;
  }
  p.weights = Eigen::MatrixXd::Zero(k, d + 1);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Eigen::MatrixXd logits = x * p.weights.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - mx).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    Eigen::MatrixXd grad = (logits - y).transpose() * x / double(n);
    grad.leftCols(d) += cfg.l2 * p.weights.leftCols(d);
    p.weights -= cfg.learning_rate * grad;
  }
  return p;
}

/// Stratified k-fold cross-validated accuracy of the probe.
inline double probe_cv_accuracy(const std::vector<LatentRecord>& records, const ProbeConfig& cfg = {}) {
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < records.size(); ++i) by_class[records[i].label].push_back(i);
  if (by_class.size() < 2) throw std::invalid_argument("probe: need at least 2 classes");
  for (const auto& [c, idx] : by_class)
    if (idx.size() < 5) throw std::invalid_argument("probe: class " + c + " has fewer than 5 codes");
  if (cfg.folds < 2) throw std::invalid_argument("probe: need at least 2 folds");
  std::vector<std::size_t> fold(records.size());
  std::mt19937_64 rng(cfg.seed);
  std::size_t next = 0;
  for (auto& [c, idx] : by_class) {
    auto shuffled = idx;
    for (std::size_t i = shuffled.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(shuffled[i - 1], shuffled[pick(rng)]);
    }
    for (auto i : shuffled) fold[i] = next++ % cfg.folds;
  }
  std::size_t correct = 0;
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    std::vector<LatentRecord> train, test;
    for (std::size_t i = 0; i < records.size(); ++i) (fold[i] == f ? test : train).push_back(records[i]);
    if (test.empty()) continue;
    const auto probe = fit_linear_probe(train, cfg);
    for (const auto& r : test) correct += probe.classify(r.z) == r.label;
  }
  return double(correct) / double(records.size());
}

}  // namespace dreg
