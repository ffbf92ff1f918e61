#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "eviscrib/errors.hpp"
#include "eviscrib/metrics.hpp"

using namespace eviscrib;
using namespace eviscrib::metrics;

namespace {

using Mask = std::vector<std::uint8_t>;

Mask random_blobs(std::mt19937_64& r, int h, int w) {
  Mask m(h * w, 0);
  std::uniform_int_distribution<int> cy(0, h - 1), cx(0, w - 1), rad(1, std::max(2, std::min(h, w) / 3)), k(0, 3);
  const int blobs = k(r);
  for (int b = 0; b < blobs; ++b) {
    const int y0 = cy(r), x0 = cx(r), rr = rad(r);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if ((y - y0) * (y - y0) + (x - x0) * (x - x0) <= rr * rr) m[y * w + x] = 1;
  }
  return m;
}

// Boundary by definition: region pixel with a 4-neighbour outside the region or the image.
Mask brute_boundary(const Mask& m, int h, int w) {
  Mask out(m.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m[y * w + x]) continue;
      const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int yy = y + dy[k], xx = x + dx[k];
        if (yy < 0 || yy >= h || xx < 0 || xx >= w || !m[yy * w + xx]) out[y * w + x] = 1;
      }
    }
  return out;
}

// All-pairs directed distances from boundary(a) to boundary(b).
std::vector<double> brute_directed(const Mask& a, const Mask& b, int h, int w) {
  const Mask ba = brute_boundary(a, h, w), bb = brute_boundary(b, h, w);
  std::vector<double> out;
  for (int i = 0; i < h * w; ++i) {
    if (!ba[i]) continue;
    long best = -1;
    for (int j = 0; j < h * w; ++j) {
      if (!bb[j]) continue;
      const long dy = i / w - j / w, dx = i % w - j % w;
      const long d2 = dy * dy + dx * dx;
      if (best < 0 || d2 < best) best = d2;
    }
    out.push_back(std::sqrt(static_cast<double>(best)));
  }
  return out;
}

double numpy_percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * (v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - lo) * (v[hi] - v[lo]);
}

LabelMap to_labels(const Mask& m, int h, int w) {
  LabelMap out(h, w);
  for (std::size_t i = 0; i < m.size(); ++i) out.values[i] = m[i];
  return out;
}

}  // namespace

TEST_CASE("identical maps score perfectly") {
  LabelMap a(10, 10, 0);
  for (int y = 2; y < 6; ++y)
    for (int x = 3; x < 8; ++x) a(y, x) = 1;
  const auto r = evaluate(a, a, 2);
  REQUIRE(r.per_class.size() == 1);
  CHECK(r.per_class[0].dice == 1.0);
  CHECK(r.per_class[0].jaccard == 1.0);
  CHECK(r.per_class[0].hd95 == 0.0);
  CHECK(r.per_class[0].asd == 0.0);
}

TEST_CASE("disjoint regions have zero overlap") {
  LabelMap a(10, 10, 0), b(10, 10, 0);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      a(y, x) = 1;
      b(y + 6, x + 6) = 1;
    }
  const auto r = evaluate(a, b, 2);
  CHECK(r.per_class[0].dice == 0.0);
  CHECK(r.per_class[0].jaccard == 0.0);
  CHECK(r.per_class[0].hd95 > 0.0);
}

TEST_CASE("square shifted by one pixel") {
  LabelMap a(6, 6, 0), b(6, 6, 0);
  for (int y = 2; y < 4; ++y)
    for (int x = 2; x < 4; ++x) {
      a(y, x) = 1;
      b(y, x + 1) = 1;
    }
  const auto r = evaluate(a, b, 2);
  CHECK(r.per_class[0].dice == doctest::Approx(0.5));
  CHECK(r.per_class[0].jaccard == doctest::Approx(1.0 / 3));
  CHECK(r.per_class[0].hd95 == doctest::Approx(1.0));
  CHECK(r.per_class[0].asd == doctest::Approx(0.5));
}

TEST_CASE("empty region conventions") {
  const int h = 8, w = 6;
  const Mask none(h * w, 0);
  Mask some(h * w, 0);
  some[10] = 1;
  const auto both = score_binary(none, none, h, w);
  CHECK(both.dice == 1.0);
  CHECK(both.jaccard == 1.0);
  CHECK(both.hd95 == 0.0);
  CHECK(both.asd == 0.0);
  const double diag = std::sqrt(double(h * h + w * w));
  for (const auto& s : {score_binary(some, none, h, w), score_binary(none, some, h, w)}) {
    CHECK(s.dice == 0.0);
    CHECK(s.jaccard == 0.0);
    CHECK(s.hd95 == doctest::Approx(diag));
    CHECK(s.asd == doctest::Approx(diag));
  }
}

TEST_CASE("dice and jaccard identity and symmetry") {
  std::mt19937_64 r(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 20, w = 17;
    const Mask a = random_blobs(r, h, w), b = random_blobs(r, h, w);
    const auto ab = score_binary(a, b, h, w), ba = score_binary(b, a, h, w);
    CHECK(std::abs(ab.jaccard - ab.dice / (2 - ab.dice)) < 1e-9);
    CHECK(ab.dice == ba.dice);
    CHECK(ab.hd95 == ba.hd95);
    CHECK(ab.asd == doctest::Approx(ba.asd).epsilon(1e-12));  // pooled in a different order
  }
}

TEST_CASE("boundary follows the 4-neighbour definition") {
  std::mt19937_64 r(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Mask m = random_blobs(r, 15, 12);
    CHECK(boundary(m, 15, 12) == brute_boundary(m, 15, 12));
  }
}

TEST_CASE("distance transform matches brute force") {
  std::mt19937_64 r(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 10; ++trial) {
    const int h = 13, w = 19;
    Mask sites(h * w);
    for (auto& s : sites) s = u(r) < 0.05;
    sites[trial] = 1;
    const auto d = distance_transform(sites, h, w);
    for (int i = 0; i < h * w; ++i) {
      double best = INFINITY;
      for (int j = 0; j < h * w; ++j)
        if (sites[j]) best = std::min(best, std::hypot(double(i / w - j / w), double(i % w - j % w)));
      CHECK(d[i] == doctest::Approx(best).epsilon(1e-12));
    }
  }
  const auto none = distance_transform(Mask(12, 0), 3, 4);
  for (double v : none) CHECK(std::isinf(v));
}

TEST_CASE("percentile uses linear interpolation") {
  CHECK(percentile({1, 2, 3, 4}, 50) == 2.5);
  CHECK(percentile({4, 1, 3, 2}, 95) == doctest::Approx(3.85));
  CHECK(percentile({7}, 95) == 7);
  CHECK(percentile({0, 10}, 0) == 0);
  CHECK(percentile({0, 10}, 100) == 10);
}

TEST_CASE("hd95 and asd match an all-pairs oracle") {
  std::mt19937_64 r(4);
  std::uniform_int_distribution<int> side(4, 32);
  int checked = 0;
  while (checked < 20) {
    const int h = side(r), w = side(r);
    const Mask a = random_blobs(r, h, w), b = random_blobs(r, h, w);
    if (std::count(a.begin(), a.end(), 1) == 0 || std::count(b.begin(), b.end(), 1) == 0) continue;
    auto pooled = brute_directed(a, b, h, w);
    const auto back = brute_directed(b, a, h, w);
    pooled.insert(pooled.end(), back.begin(), back.end());
    double mean = 0;
    for (double v : pooled) mean += v;
    mean /= pooled.size();
    const auto s = evaluate(to_labels(a, h, w), to_labels(b, h, w), 2).per_class[0];
    CHECK(s.hd95 == numpy_percentile(pooled, 95));
    CHECK(s.asd == mean);
    ++checked;
  }
}

TEST_CASE("multi-class report and averaging") {
  LabelMap t(8, 8, 0), p(8, 8, 0);
  for (int x = 0; x < 4; ++x) t(1, x) = p(1, x) = 1;
  for (int x = 0; x < 4; ++x) t(5, x) = 2;
  const auto r = evaluate(p, t, 3);
  REQUIRE(r.per_class.size() == 2);
  CHECK(r.per_class[0].dice == 1.0);
  CHECK(r.per_class[1].dice == 0.0);
  CHECK(r.mean.dice == 0.5);

  const auto avg = average({r, evaluate(t, t, 3)});
  CHECK(avg.per_class[1].dice == 0.5);
  CHECK(avg.mean.dice == 0.75);
}

TEST_CASE("evaluate contracts") {
  CHECK_THROWS_AS(evaluate(LabelMap(4, 4), LabelMap(4, 5), 2), ContractError);
  LabelMap bad(4, 4);
  bad(0, 0) = 2;
  CHECK_THROWS_AS(evaluate(bad, LabelMap(4, 4), 2), ContractError);
}

TEST_CASE("csv layout") {
  LabelMap a(6, 6, 0);
  a(2, 2) = 1;
  const std::string csv = to_csv(evaluate(a, a, 2));
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "class,dice,jaccard,hd95,asd");
  std::getline(in, line);
  CHECK(line == "1,1,1,0,0");
  std::getline(in, line);
  CHECK(line == "mean,1,1,0,0");
  CHECK_FALSE(std::getline(in, line));
}
