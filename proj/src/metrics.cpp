#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <sstream>

#include "eviscrib/errors.hpp"
#include "eviscrib/metrics.hpp"

namespace eviscrib::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Squared distance transform of a 1-D sampled function (lower envelope of parabolas).
void edt_1d(const double* f, double* d, int n, int stride_in, int stride_out, std::vector<int>& v,
            std::vector<double>& z) {
  int k = -1;
  for (int q = 0; q < n; ++q) {
    const double fq = f[q * stride_in];
    if (fq == kInf) continue;
    while (k >= 0) {
      const int p = v[k];
      const double s = ((fq + double(q) * q) - (f[p * stride_in] + double(p) * p)) / (2.0 * (q - p));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : ((fq + double(q) * q) - (f[v[k - 1] * stride_in] + double(v[k - 1]) * v[k - 1])) /
                                (2.0 * (q - v[k - 1]));
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) d[q * stride_out] = kInf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (j < k && z[j + 1] < q) ++j;
    const double dq = q - v[j];
    d[q * stride_out] = f[v[j] * stride_in] + dq * dq;
  }
}

std::vector<std::uint8_t> region_of(const LabelMap& m, int cls) {
  std::vector<std::uint8_t> r(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) r[i] = m.values[i] == cls;
  return r;
}

}  // namespace

std::vector<std::uint8_t> boundary(const std::vector<std::uint8_t>& region, int height, int width) {
  std::vector<std::uint8_t> out(region.size(), 0);
  auto in = [&](int y, int x) {
    return y >= 0 && y < height && x >= 0 && x < width && region[static_cast<std::size_t>(y) * width + x];
  };
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (in(y, x) && !(in(y - 1, x) && in(y + 1, x) && in(y, x - 1) && in(y, x + 1)))
        out[static_cast<std::size_t>(y) * width + x] = 1;
  return out;
}

std::vector<double> distance_transform(const std::vector<std::uint8_t>& sites, int height, int width) {
  std::vector<double> f(sites.size()), tmp(sites.size()), out(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) f[i] = sites[i] ? 0.0 : kInf;
  const int n = std::max(height, width);
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  for (int x = 0; x < width; ++x) edt_1d(f.data() + x, tmp.data() + x, height, width, width, v, z);
  for (int y = 0; y < height; ++y)
    edt_1d(tmp.data() + static_cast<std::size_t>(y) * width, out.data() + static_cast<std::size_t>(y) * width,
           width, 1, 1, v, z);
  for (double& d : out) d = std::sqrt(d);
  return out;
}

std::vector<double> surface_distances(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                                      int height, int width) {
  const auto ba = boundary(a, height, width), bb = boundary(b, height, width);
  const auto da = distance_transform(ba, height, width), db = distance_transform(bb, height, width);
  std::vector<double> out;
  for (std::size_t i = 0; i < ba.size(); ++i)
    if (ba[i]) out.push_back(db[i]);
  for (std::size_t i = 0; i < bb.size(); ++i)
    if (bb[i]) out.push_back(da[i]);
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("percentile: no values");
  if (q < 0 || q > 100) throw ContractError("percentile: q outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * (values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - lo;
  return values[lo] + (values[hi] - values[lo]) * frac;
}

ClassScores score_binary(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth, int height,
                         int width) {
  if (pred.size() != truth.size() || pred.size() != static_cast<std::size_t>(height) * width)
    throw ContractError("score_binary: size mismatch");
  std::size_t na = 0, nb = 0, inter = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    na += pred[i] != 0;
    nb += truth[i] != 0;
    inter += pred[i] && truth[i];
  }
  if (na == 0 && nb == 0) return {1.0, 1.0, 0.0, 0.0};
  if (na == 0 || nb == 0) {
    const double diag = std::hypot(double(height), double(width));
    return {0.0, 0.0, diag, diag};
  }
  ClassScores s;
  s.dice = 2.0 * inter / double(na + nb);
  s.jaccard = inter / double(na + nb - inter);
  const auto d = surface_distances(pred, truth, height, width);
  double total = 0;
  for (double v : d) total += v;
  s.asd = total / d.size();
  s.hd95 = percentile(d, 95.0);
  return s;
}

MetricReport evaluate(const LabelMap& pred, const LabelMap& truth, int num_classes) {
  if (pred.height != truth.height || pred.width != truth.width || pred.size() != truth.size())
    throw ContractError("evaluate: prediction and truth differ in size");
  if (num_classes < 2) throw ContractError("evaluate: need at least two classes");
  for (const auto* m : {&pred, &truth})
    for (int v : m->values)
      if (v < 0 || v >= num_classes) throw ContractError("evaluate: label outside [0, C)");
  MetricReport r;
  for (int cls = 1; cls < num_classes; ++cls)
    r.per_class.push_back(score_binary(region_of(pred, cls), region_of(truth, cls), pred.height, pred.width));
  for (const auto& s : r.per_class) {
    r.mean.dice += s.dice;
    r.mean.jaccard += s.jaccard;
    r.mean.hd95 += s.hd95;
    r.mean.asd += s.asd;
  }
  const double k = static_cast<double>(r.per_class.size());
  r.mean = {r.mean.dice / k, r.mean.jaccard / k, r.mean.hd95 / k, r.mean.asd / k};
  return r;
}

MetricReport average(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw ContractError("average: no reports");
  MetricReport out;
  out.per_class.resize(reports[0].per_class.size());
  auto acc = [](ClassScores& into, const ClassScores& s) {
    into.dice += s.dice;
    into.jaccard += s.jaccard;
    into.hd95 += s.hd95;
    into.asd += s.asd;
  };
  for (const auto& r : reports) {
    if (r.per_class.size() != out.per_class.size()) throw ContractError("average: class count differs");
    for (std::size_t k = 0; k < r.per_class.size(); ++k) acc(out.per_class[k], r.per_class[k]);
    acc(out.mean, r.mean);
  }
  const double n = static_cast<double>(reports.size());
  auto div = [n](ClassScores& s) { s = {s.dice / n, s.jaccard / n, s.hd95 / n, s.asd / n}; };
  for (auto& s : out.per_class) div(s);
  div(out.mean);
  return out;
}

void write_csv(std::ostream& out, const MetricReport& report) {
  char buf[160];
  out << "class,dice,jaccard,hd95,asd\n";
  auto row = [&](const std::string& name, const ClassScores& s) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g\n", s.dice, s.jaccard, s.hd95, s.asd);
    out << name << buf;
  };
  for (std::size_t k = 0; k < report.per_class.size(); ++k) row(std::to_string(k + 1), report.per_class[k]);
  row("mean", report.mean);
}

std::string to_csv(const MetricReport& report) {
  std::ostringstream s;
  write_csv(s, report);
  return s.str();
}

}  // namespace eviscrib::metrics
