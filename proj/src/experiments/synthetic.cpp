#include "afflow/experiments/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "afflow/errors.hpp"
#include "afflow/rng.hpp"

namespace afflow::experiments {

namespace {

struct Cholesky2 {
  double l00, l10, l11;
};

Cholesky2 cholesky(const MixtureMode& m) {
  const auto& c = m.cov;
  if (c[1] != c[2]) throw DomainError("mixture: covariance must be symmetric");
  if (!(c[0] > 0.0)) throw DomainError("mixture: covariance not positive definite");
  const double l00 = std::sqrt(c[0]);
  const double l10 = c[2] / l00;
  const double rest = c[3] - l10 * l10;
  if (!(rest > 0.0)) throw DomainError("mixture: covariance not positive definite");
  return {l00, l10, std::sqrt(rest)};
}

double log_normal(double x, double mu, double sd) {
  const double u = (x - mu) / sd;
  return -0.5 * u * u - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
}

}  // namespace

Dataset gen_2d_mixture(const std::vector<MixtureMode>& modes, std::size_t n, std::uint64_t seed) {
  if (modes.empty()) throw DomainError("mixture: no modes");
  double total = 0.0;
  std::vector<Cholesky2> chol;
  for (const auto& m : modes) {
    if (!(m.weight >= 0.0)) throw DomainError("mixture: negative weight");
    total += m.weight;
    chol.push_back(cholesky(m));
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("mixture: weights must sum to 1");
  Rng rng(seed);
  Dataset ds;
  ds.n = n;
  ds.positions = 2;
  ds.channels = 1;
  ds.source = DataSource::kSynthetic2d;
  ds.data.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    std::size_t k = 0;
    double acc = modes[0].weight;
    while (k + 1 < modes.size() && u >= acc) acc += modes[++k].weight;
    const double e0 = rng.normal(), e1 = rng.normal();
    const auto& m = modes[k];
    const auto& l = chol[k];
    ds.data.push_back(static_cast<float>(m.mean[0] + l.l00 * e0));
    ds.data.push_back(static_cast<float>(m.mean[1] + l.l10 * e0 + l.l11 * e1));
  }
  return ds;
}

std::vector<MixtureMode> canonical_target() {
  return {{0.5, {0.0, -2.0}, {1.0, 0.0, 0.0, 0.01}}, {0.5, {0.0, 2.0}, {1.0, 0.0, 0.0, 0.01}}};
}

double canonical_bimodal_entropy() {
  static const double h = [] {
    // -int p log p over [-4, 4]; the modes sit 20 sd inside the bounds
    constexpr std::size_t n = 400001;
    const double lo = -4.0, hi = 4.0, step = (hi - lo) / static_cast<double>(n - 1);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = lo + step * static_cast<double>(i);
      const double a = std::log(0.5) + log_normal(x, -2.0, 0.1);
      const double b = std::log(0.5) + log_normal(x, 2.0, 0.1);
      const double m = std::max(a, b);
      const double logp = m + std::log(std::exp(a - m) + std::exp(b - m));
      const double w = (i == 0 || i + 1 == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      acc += w * std::exp(logp) * -logp;
    }
    return acc * step / 3.0;
  }();
  return h;
}

double canonical_entropy_per_dim() {
  const double h1 = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  return 0.5 * (h1 + canonical_bimodal_entropy());
}

ImageKind parse_image_kind(const std::string& name) {
  if (name == "bars") return ImageKind::kBars;
  if (name == "checker") return ImageKind::kChecker;
  if (name == "gaussians" || name == "gaussians-on-grid") return ImageKind::kGaussians;
  throw ConfigError("unknown image kind '" + name + "' (expected bars, checker or gaussians)");
}

const char* image_kind_name(ImageKind kind) {
  switch (kind) {
    case ImageKind::kBars:
      return "bars";
    case ImageKind::kChecker:
      return "checker";
    default:
      return "gaussians";
  }
}

Dataset gen_synthetic_images(const ImageSpec& spec, std::size_t n, std::uint64_t seed) {
  const std::size_t s = spec.size;
  if (s == 0 || spec.patch == 0 || s % spec.patch != 0)
    throw ShapeError("images: size " + std::to_string(s) + " not divisible by patch " +
                     std::to_string(spec.patch));
  if (spec.classes == 0) throw ConfigError("images: classes must be positive");
  if (spec.kind == ImageKind::kBars && spec.classes > 2)
    throw ConfigError("images: bars has two classes");
  const std::size_t grid = static_cast<std::size_t>(
      std::ceil(std::sqrt(static_cast<double>(spec.classes))));
  Rng rng(seed);
  Dataset ds;
  ds.n = n;
  ds.positions = s * s;
  ds.channels = 1;
  ds.labeled = true;
  ds.source = DataSource::kSyntheticImages;
  ds.data.reserve(n * s * s);
  std::vector<double> img(s * s);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % spec.classes;
    switch (spec.kind) {
      case ImageKind::kBars: {
        // each line is lit with probability 1/2, at least one line lit
        std::vector<bool> lit(s);
        bool any = false;
        while (!any)
          for (std::size_t k = 0; k < s; ++k) any = (lit[k] = rng.uniform() < 0.5) || any;
        for (std::size_t y = 0; y < s; ++y)
          for (std::size_t x = 0; x < s; ++x)
            img[y * s + x] = lit[label == 0 ? y : x] ? 1.0 : -1.0;
        break;
      }
      case ImageKind::kChecker: {
        const std::size_t cell = std::size_t{1} << std::min<std::size_t>(label, 8);
        const std::size_t phase = rng.below(2);
        for (std::size_t y = 0; y < s; ++y)
          for (std::size_t x = 0; x < s; ++x)
            img[y * s + x] = ((y / cell + x / cell + phase) % 2) ? 1.0 : -1.0;
        break;
      }
      case ImageKind::kGaussians: {
        const double cell = static_cast<double>(s) / static_cast<double>(grid);
        const double cx = (static_cast<double>(label % grid) + 0.5) * cell + 0.5 * rng.normal();
        const double cy = (static_cast<double>(label / grid) + 0.5) * cell + 0.5 * rng.normal();
        const double width = 0.25 * cell + 0.5;
        for (std::size_t y = 0; y < s; ++y)
          for (std::size_t x = 0; x < s; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            img[y * s + x] = 2.0 * std::exp(-(dx * dx + dy * dy) / (2.0 * width * width)) - 1.0;
          }
        break;
      }
    }
    for (double v : img)
      ds.data.push_back(static_cast<float>(std::clamp(v + spec.jitter * rng.normal(), -1.0, 1.0)));
    ds.labels.push_back(static_cast<std::uint32_t>(label));
  }
  return ds;
}

}  // namespace afflow::experiments
