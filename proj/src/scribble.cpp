#include <algorithm>
#include <array>
#include <deque>
#include <random>

#include "eviscrib/data.hpp"
#include "eviscrib/errors.hpp"

namespace eviscrib::data {

namespace {

constexpr std::array<int, 8> kDy = {-1, -1, 0, 1, 1, 1, 0, -1};
constexpr std::array<int, 8> kDx = {0, 1, 1, 1, 0, -1, -1, -1};

// Neighbour indices within `set` (nonzero entries), 8-connectivity.
template <typename F>
void for_neighbors(int idx, int height, int width, F&& f) {
  const int y = idx / width, x = idx % width;
  for (int k = 0; k < 8; ++k) {
    const int yy = y + kDy[k], xx = x + kDx[k];
    if (yy >= 0 && yy < height && xx >= 0 && xx < width) f(yy * width + xx);
  }
}

int degree(const std::vector<std::uint8_t>& set, int idx, int height, int width) {
  int d = 0;
  for_neighbors(idx, height, width, [&](int j) { d += set[j] ? 1 : 0; });
  return d;
}

// BFS distances from `start` inside `set`; unreachable = -1.
std::vector<int> geodesic(const std::vector<std::uint8_t>& set, int start, int height, int width) {
  std::vector<int> dist(set.size(), -1);
  std::deque<int> queue{start};
  dist[start] = 0;
  while (!queue.empty()) {
    const int i = queue.front();
    queue.pop_front();
    for_neighbors(i, height, width, [&](int j) {
      if (set[j] && dist[j] < 0) {
        dist[j] = dist[i] + 1;
        queue.push_back(j);
      }
    });
  }
  return dist;
}

// Longest geodesic path length of each skeleton component (double BFS sweep),
// reported per pixel.
std::vector<int> component_diameters(const std::vector<std::uint8_t>& skel, int height, int width) {
  std::vector<int> diameter(skel.size(), 0);
  std::vector<std::uint8_t> seen(skel.size(), 0);
  for (int i = 0; i < static_cast<int>(skel.size()); ++i) {
    if (!skel[i] || seen[i]) continue;
    auto d0 = geodesic(skel, i, height, width);
    const int far = static_cast<int>(std::max_element(d0.begin(), d0.end()) - d0.begin());
    auto d1 = geodesic(skel, far, height, width);
    const int diam = *std::max_element(d1.begin(), d1.end());
    for (std::size_t j = 0; j < skel.size(); ++j)
      if (d0[j] >= 0) {
        seen[j] = 1;
        diameter[j] = diam;
      }
  }
  return diameter;
}

// Removes end branches (endpoint .. pixel before a junction) shorter than 10%
// of their component's longest path. Branch-free paths are kept whole.
void prune_spurs(std::vector<std::uint8_t>& skel, int height, int width) {
  const auto diameter = component_diameters(skel, height, width);
  std::vector<std::vector<int>> doomed;
  for (int i = 0; i < static_cast<int>(skel.size()); ++i) {
    if (!skel[i] || degree(skel, i, height, width) != 1) continue;
    std::vector<int> branch{i};
    int prev = -1, cur = i;
    bool hit_junction = false;
    while (true) {
      int next = -1, count = 0;
      for_neighbors(cur, height, width, [&](int j) {
        if (skel[j] && j != prev && std::find(branch.begin(), branch.end(), j) == branch.end()) {
          ++count;
          if (next < 0) next = j;
        }
      });
      if (count == 0) break;
      if (degree(skel, next, height, width) >= 3 || count > 1) {
        hit_junction = true;
        break;
      }
      prev = cur;
      cur = next;
      branch.push_back(cur);
    }
    if (hit_junction && static_cast<double>(branch.size()) < 0.1 * diameter[i]) doomed.push_back(std::move(branch));
  }
  for (const auto& b : doomed)
    for (int j : b) skel[j] = 0;
}

}  // namespace

std::vector<std::vector<int>> connected_components(const LabelMap& labels, int value) {
  const int h = labels.height, w = labels.width;
  std::vector<std::uint8_t> seen(labels.size(), 0);
  std::vector<std::vector<int>> comps;
  for (int i = 0; i < static_cast<int>(labels.size()); ++i) {
    if (seen[i] || labels.values[i] != value) continue;
    std::vector<int> comp;
    std::deque<int> queue{i};
    seen[i] = 1;
    while (!queue.empty()) {
      const int p = queue.front();
      queue.pop_front();
      comp.push_back(p);
      for_neighbors(p, h, w, [&](int j) {
        if (!seen[j] && labels.values[j] == value) {
          seen[j] = 1;
          queue.push_back(j);
        }
      });
    }
    std::sort(comp.begin(), comp.end());
    comps.push_back(std::move(comp));
  }
  // Stable: equal sizes keep raster order of their first pixel.
  std::stable_sort(comps.begin(), comps.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
  return comps;
}

std::vector<std::uint8_t> thin(std::vector<std::uint8_t> img, int height, int width) {
  auto at = [&](int y, int x) -> int {
    return (y >= 0 && y < height && x >= 0 && x < width && img[static_cast<std::size_t>(y) * width + x]) ? 1 : 0;
  };
  bool changed = true;
  std::vector<int> remove;
  while (changed) {
    changed = false;
    for (int step = 0; step < 2; ++step) {
      remove.clear();
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          if (!at(y, x)) continue;
          // p2..p9 clockwise from north.
          const int p[8] = {at(y - 1, x), at(y - 1, x + 1), at(y, x + 1), at(y + 1, x + 1),
                            at(y + 1, x), at(y + 1, x - 1), at(y, x - 1), at(y - 1, x - 1)};
          int b = 0, a = 0;
          for (int k = 0; k < 8; ++k) {
            b += p[k];
            a += (p[k] == 0 && p[(k + 1) % 8] == 1) ? 1 : 0;
          }
          if (b < 2 || b > 6 || a != 1) continue;
          const bool ok = step == 0 ? (p[0] * p[2] * p[4] == 0 && p[2] * p[4] * p[6] == 0)
                                    : (p[0] * p[2] * p[6] == 0 && p[0] * p[4] * p[6] == 0);
          if (ok) remove.push_back(y * width + x);
        }
      for (int i : remove) img[i] = 0;
      changed = changed || !remove.empty();
    }
  }
  return img;
}

LabelMap make_scribble(const LabelMap& dense_mask, int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("make_scribble: need at least two classes");
  for (int v : dense_mask.values)
    if (v < 0 || v >= num_classes) throw ContractError("make_scribble: mask value outside [0, C)");
  const int h = dense_mask.height, w = dense_mask.width;
  LabelMap out(h, w, num_classes);
  std::mt19937_64 rng(seed);

  for (int cls = 0; cls < num_classes; ++cls) {
    const auto comps = connected_components(dense_mask, cls);
    if (comps.empty()) continue;
    std::size_t area = 0;
    for (const auto& c : comps) area += c.size();

    std::vector<std::uint8_t> binary(dense_mask.size(), 0);
    for (std::size_t k = 0; k < std::min<std::size_t>(2, comps.size()); ++k)
      for (int i : comps[k]) binary[i] = 1;
    auto skel = thin(std::move(binary), h, w);
    prune_spurs(skel, h, w);

    std::vector<int> pixels;
    for (int i = 0; i < static_cast<int>(skel.size()); ++i)
      if (skel[i]) pixels.push_back(i);
    const std::size_t cap = area / 5;
    if (pixels.size() > cap) {
      // Keep a connected run of the skeleton, grown breadth-first from a
      // seed-chosen pixel.
      std::vector<int> kept;
      std::vector<std::uint8_t> seen(skel.size(), 0);
      std::uniform_int_distribution<std::size_t> pick(0, pixels.size() - 1);
      std::deque<int> queue;
      std::size_t next_start = pick(rng);
      while (kept.size() < cap) {
        if (queue.empty()) {
          while (seen[pixels[next_start % pixels.size()]]) ++next_start;
          const int s = pixels[next_start % pixels.size()];
          seen[s] = 1;
          queue.push_back(s);
        }
        const int p = queue.front();
        queue.pop_front();
        kept.push_back(p);
        for_neighbors(p, h, w, [&](int j) {
          if (skel[j] && !seen[j]) {
            seen[j] = 1;
            queue.push_back(j);
          }
        });
      }
      pixels = std::move(kept);
    }
    for (int i : pixels) out.values[i] = cls;
  }
  return out;
}

}  // namespace eviscrib::data
