#include "redloop/logistic.h"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "redloop/error.h"

namespace redloop::logistic {

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)), overflow safe.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

Eigen::VectorXd pack(const Model& m) {
  Eigen::VectorXd theta(static_cast<Eigen::Index>(m.weights.size()) + 1);
  for (std::size_t i = 0; i < m.weights.size(); ++i) theta[static_cast<Eigen::Index>(i)] = m.weights[i];
  theta[theta.size() - 1] = m.bias;
  return theta;
}

Model unpack(const Eigen::VectorXd& theta) {
  Model m;
  m.weights.assign(theta.data(), theta.data() + theta.size() - 1);
  m.bias = theta[theta.size() - 1];
  return m;
}

void check(const Problem& p) {
  if (p.rows.size() != p.labels.size())
    throw PreconditionError("logistic: rows and labels differ in length");
  if (p.rows.empty()) throw PreconditionError("logistic: empty dataset");
  if (p.l2 <= 0) throw PreconditionError("logistic: l2 must be positive");
  if (p.prior && static_cast<int>(p.prior->weights.size()) != p.dim)
    throw PreconditionError("logistic: prior dimension mismatch");
  for (const Row& r : p.rows)
    for (int f : r)
      if (f < 0 || f >= p.dim) throw PreconditionError("logistic: feature index out of range");
}

}  // namespace

Model zeros(int dim) { return Model{std::vector<double>(static_cast<std::size_t>(dim), 0.0), 0.0}; }

double logit(const Model& m, const Row& x) {
  double z = m.bias;
  for (int f : x) z += m.weights[static_cast<std::size_t>(f)];
  return z;
}

double predict(const Model& m, const Row& x) { return sigmoid(logit(m, x)); }

double objective(const Problem& p, const Model& m) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows.size(); ++i) {
    double z = logit(m, p.rows[i]);
    total += p.labels[i] == 1 ? softplus(-z) : softplus(z);
  }
  double reg = 0.0;
  for (std::size_t k = 0; k < m.weights.size(); ++k) {
    double d = m.weights[k] - (p.prior ? p.prior->weights[k] : 0.0);
    reg += d * d;
  }
  double db = m.bias - (p.prior ? p.prior->bias : 0.0);
  reg += db * db;
  return total + 0.5 * p.l2 * reg;
}

double mean_bce(const Problem& p, const Model& m) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows.size(); ++i) {
    double z = logit(m, p.rows[i]);
    total += p.labels[i] == 1 ? softplus(-z) : softplus(z);
  }
  return total / static_cast<double>(p.rows.size());
}

Fit fit(const Problem& p) {
  check(p);
  const Eigen::Index d = p.dim + 1;
  const Eigen::Index n = static_cast<Eigen::Index>(p.rows.size());
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int f : p.rows[static_cast<std::size_t>(i)]) x(i, f) = 1.0;
    x(i, d - 1) = 1.0;
  }
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = p.labels[static_cast<std::size_t>(i)];

  const Model origin = p.prior ? *p.prior : zeros(p.dim);
  const Eigen::VectorXd theta0 = pack(origin);
  Eigen::VectorXd theta = theta0;
  double f_cur = objective(p, unpack(theta));

  Fit out;
  for (int it = 0; it < 200; ++it) {
    Eigen::VectorXd z = x * theta;
    Eigen::VectorXd prob = z.unaryExpr([](double v) { return sigmoid(v); });
    Eigen::VectorXd grad = x.transpose() * (prob - y) + p.l2 * (theta - theta0);
    out.gradient_norm = grad.cwiseAbs().maxCoeff();
    if (out.gradient_norm < 1e-10) break;
    Eigen::VectorXd w = prob.cwiseProduct(Eigen::VectorXd::Ones(n) - prob);
    Eigen::MatrixXd hess = x.transpose() * w.asDiagonal() * x;
    hess.diagonal().array() += p.l2;
    Eigen::VectorXd step = hess.ldlt().solve(grad);

    double t = 1.0;
    Eigen::VectorXd next = theta - step;
    double f_next = objective(p, unpack(next));
    while (f_next > f_cur && t > 1e-12) {
      t *= 0.5;
      next = theta - t * step;
      f_next = objective(p, unpack(next));
    }
    theta = next;
    f_cur = f_next;
    out.newton_iterations = it + 1;
  }
  out.model = unpack(theta);
  return out;
}

Model interpolate(const Model& start, const Model& end, double t) {
  Model m;
  m.weights.resize(end.weights.size());
  for (std::size_t i = 0; i < end.weights.size(); ++i)
    m.weights[i] = start.weights[i] + t * (end.weights[i] - start.weights[i]);
  m.bias = start.bias + t * (end.bias - start.bias);
  return m;
}

}  // namespace redloop::logistic
