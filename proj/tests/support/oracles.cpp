#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include "afflow/autodiff/graph.hpp"
#include "afflow/autodiff/ops.hpp"

namespace afflow::testing {

ad::Tensor naive_inverse(const flow::FlowModel& model, std::size_t block, const ad::Tensor& z,
                         std::span<const std::size_t> labels) {
  const auto& blk = model.blocks[block];
  const std::size_t b = z.extent(0);
  const std::size_t n = z.extent(1);
  const std::size_t c = z.extent(2);
  ad::Tensor x(z.shape(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const flow::GaussianParams g = flow::af_params(model, block, x, labels);
    const std::size_t pos = blk.order[i];
    auto xv = x.mutable_values();
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t at = (r * n + pos) * c + ch;
        xv[at] = g.mu.at(at) + g.sigma.at(at) * z.at(at);
      }
  }
  return x;
}

std::vector<double> stack_jacobian(const flow::FlowModel& model, const ad::Tensor& x,
                                   std::span<const std::size_t> labels) {
  const std::size_t m = x.size();
  std::vector<double> jac(m * m);
  for (std::size_t i = 0; i < m; ++i) {
    ad::Tensor xi = x.clone();
    xi.set_requires_grad(true);
    ad::Graph g;
    ad::Tensor z = flow::stack_forward(model, xi, labels).z;
    ad::Tensor zi = ad::index_select(ad::reshape(z, {m}), 0, std::vector<std::size_t>{i});
    g.backward(ad::sum(zi));
    std::copy(xi.grad().begin(), xi.grad().end(), jac.begin() + static_cast<std::ptrdiff_t>(i * m));
  }
  return jac;
}

double log_abs_det(std::vector<double> a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t r = k + 1; r < n; ++r)
      if (std::abs(a[r * n + k]) > std::abs(a[piv * n + k])) piv = r;
    if (piv != k)
      for (std::size_t c = 0; c < n; ++c) std::swap(a[k * n + c], a[piv * n + c]);
    const double p = a[k * n + k];
    acc += std::log(std::abs(p));
    for (std::size_t r = k + 1; r < n; ++r) {
      const double f = a[r * n + k] / p;
      for (std::size_t c = k; c < n; ++c) a[r * n + c] -= f * a[k * n + c];
    }
  }
  return acc;
}

double ks_normal(std::vector<double> samples, double mean, double sd) {
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-(samples[i] - mean) / (sd * std::sqrt(2.0)));
    worst = std::max({worst, cdf - static_cast<double>(i) / n,
                      static_cast<double>(i + 1) / n - cdf});
  }
  return worst;
}

}  // namespace afflow::testing

namespace afflow::testing {

namespace {

double log_normal(double x, double mu, double sigma) {
  const double u = (x - mu) / sigma;
  return -0.5 * u * u - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

// Simpson weights on an odd number of points.
struct Moments {
  double log_z, mean, sd;
};

Moments simpson_moments(const std::vector<double>& x, const std::vector<double>& logf) {
  const std::size_t n = x.size();
  const double h = x[1] - x[0];
  const double peak = *std::max_element(logf.begin(), logf.end());
  double z = 0.0, m1 = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = (i == 0 || i + 1 == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    const double f = w * std::exp(logf[i] - peak);
    z += f;
    m1 += f * x[i];
    m2 += f * x[i] * x[i];
  }
  const double mean = m1 / z;
  return {peak + std::log(z * h / 3.0), mean, std::sqrt(m2 / z - mean * mean)};
}

std::pair<std::vector<double>, std::vector<double>> tilt_on(double lo, double hi, std::size_t n,
                                                            double mu_c, double sigma_c,
                                                            double mu_u, double sigma_u,
                                                            double omega) {
  std::vector<double> x(n), lf(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    lf[i] = (1.0 + omega) * log_normal(x[i], mu_c, sigma_c) -
            omega * log_normal(x[i], mu_u, sigma_u);
  }
  return {x, lf};
}

}  // namespace

GridTilt grid_tilt(double mu_c, double sigma_c, double mu_u, double sigma_u, double omega,
                   std::size_t points, double half_width) {
  if (points % 2 == 0) ++points;
  // the tilt's mean moves at most (1 + omega) |mu_c - mu_u| away from mu_c
  const double reach = (1.0 + omega) * std::abs(mu_c - mu_u) + 40.0 * sigma_c;
  auto [cx, clf] = tilt_on(mu_c - reach, mu_c + reach, 40001, mu_c, sigma_c, mu_u, sigma_u, omega);
  const Moments coarse = simpson_moments(cx, clf);
  auto [x, lf] = tilt_on(coarse.mean - half_width * coarse.sd, coarse.mean + half_width * coarse.sd,
                         points, mu_c, sigma_c, mu_u, sigma_u, omega);
  const Moments fine = simpson_moments(x, lf);
  GridTilt g;
  g.x = x;
  g.density.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) g.density[i] = std::exp(lf[i] - fine.log_z);
  g.mean = fine.mean;
  g.sd = fine.sd;
  return g;
}

}  // namespace afflow::testing
