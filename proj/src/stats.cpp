#include "magic/stats.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace magic {

namespace {

double mean_of(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  return s / double(xs.size());
}

double sample_var(const std::vector<double>& xs, double mean) {
  double s = 0;
  for (double x : xs) s += (x - mean) * (x - mean);
  return s / double(xs.size() - 1);
}

// continued fraction for the incomplete beta (Numerical Recipes form)
double betacf(double a, double b, double x) {
  constexpr int max_iter = 300;
  constexpr double tiny = 1e-300, stop = 1e-15;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < stop) return h;
  }
  throw std::runtime_error("incomplete beta did not converge");
}

}  // namespace

double reg_incomplete_beta(double a, double b, double x) {
  if (!(a > 0) || !(b > 0)) throw std::invalid_argument("incomplete beta: a, b must be positive");
  if (!(x >= 0 && x <= 1)) throw std::invalid_argument("incomplete beta: x out of [0,1]");
  if (x == 0) return 0;
  if (x == 1) return 1;
  const double front = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                                a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1) / (a + b + 2)) return front * betacf(a, b, x) / a;
  return 1 - front * betacf(b, a, 1 - x) / b;
}

WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw std::invalid_argument("welch_t_test: need at least two samples per side");
  const double na = double(a.size()), nb = double(b.size());
  const double ma = mean_of(a), mb = mean_of(b);
  const double va = sample_var(a, ma), vb = sample_var(b, mb);
  if (va == 0 && vb == 0)
    throw std::invalid_argument("welch_t_test: both sample variances are zero");

  WelchResult r;
  const double sa = va / na, sb = vb / nb;
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1) + sb * sb / (nb - 1));
  if (r.t == 0) {
    r.p = 1;
  } else {
    // two-tailed survival of Student's t: I_{df/(df+t^2)}(df/2, 1/2)
    r.p = reg_incomplete_beta(r.df / 2, 0.5, r.df / (r.df + r.t * r.t));
  }
  return r;
}

MeanStd aggregate_seeds(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("aggregate_seeds: empty sample");
  MeanStd out;
  out.mean = mean_of(xs);
  out.std = xs.size() == 1 ? 0.0 : std::sqrt(sample_var(xs, out.mean));
  return out;
}

}  // namespace magic
