#pragma once

// Caption retrieval: rank the true caption among all grammar captions by
// comparing renders of a generated object against oracle renders of each
// caption's canonical scene. Per view the score is silhouette IoU times
// color-histogram intersection; scores average over four orbit views. The
// oracle side is precomputed once into an index and reused across objects.

#include <array>
#include <string>
#include <vector>

#include "metrics.h"
#include "volrend.h"

namespace pi3d {

inline constexpr int kRetrievalViews = 4;
inline constexpr int kHistBins = 4;  // per channel
inline constexpr int kHistCells = kHistBins * kHistBins * kHistBins;

using color_hist = std::array<double, kHistCells>;

// Azimuths 0/90/180/270 degrees at 15 degrees elevation.
inline std::array<camera_pose, kRetrievalViews> retrieval_cameras() {
  constexpr double pi = 3.14159265358979323846;
  const double elev = 15.0 * pi / 180.0;
  std::array<camera_pose, kRetrievalViews> cams;
  for (int v = 0; v < kRetrievalViews; ++v)
    cams[size_t(v)] = orbit_camera(double(v) * pi / 2, elev);
  return cams;
}

// Normalized color histogram over pixels where on != 0; all-zero when none.
template <scalar T>
color_hist color_histogram(const image2d<T>& rgb,
                           const std::vector<uint8_t>& on) {
  check(rgb.ch == 3, "histogram needs an rgb image");
  check(on.size() == size_t(rgb.h) * rgb.w, "mask size mismatch");
  color_hist h{};
  int64_t count = 0;
  for (int i = 0; i < rgb.h; ++i)
    for (int j = 0; j < rgb.w; ++j) {
      if (!on[size_t(i) * rgb.w + j]) continue;
      int cell = 0;
      for (int c = 0; c < 3; ++c) {
        const double v = clamp(double(rgb.at(i, j, c)), 0.0, 1.0);
        cell = cell * kHistBins +
               std::min(kHistBins - 1, int(v * kHistBins));
      }
      h[size_t(cell)] += 1.0;
      ++count;
    }
  if (count > 0)
    for (double& v : h) v /= double(count);
  return h;
}

inline double hist_intersection(const color_hist& a, const color_hist& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += std::min(a[i], b[i]);
  return s;
}

// Four rendered views of the object under evaluation (or of an oracle scene,
// for self-consistency checks). Masks are [0,1] images thresholded at 0.5.
template <scalar T>
struct probe_views {
  int res = 0;
  std::array<image2d<T>, kRetrievalViews> rgb;
  std::array<image2d<T>, kRetrievalViews> mask;
};

template <scalar T>
probe_views<T> render_probe_views(const triplane_grid<T>& tp,
                                  const decoder_params<T>& dec, int res,
                                  int n_samples) {
  check(res > 0 && n_samples > 0, "probe rendering needs positive sizes");
  probe_views<T> out;
  out.res = res;
  const auto cams = retrieval_cameras();
  sampling_config scfg;
  scfg.n_samples = n_samples;
  render_workspace<T> ws;
  for (int v = 0; v < kRetrievalViews; ++v) {
    auto view = render_view(tp, dec, cams[size_t(v)], res, res, scfg, ws);
    out.rgb[size_t(v)] = std::move(view.rgb);
    out.mask[size_t(v)] = std::move(view.mask);
  }
  return out;
}

template <scalar T>
probe_views<T> oracle_probe_views(const scene_spec& s, int res) {
  probe_views<T> out;
  out.res = res;
  const auto cams = retrieval_cameras();
  for (int v = 0; v < kRetrievalViews; ++v) {
    view_record view = render_oracle_view(s, cams[size_t(v)], res, res);
    image2d<T> rgb(res, res, 3), mask(res, res, 1);
    for (size_t i = 0; i < rgb.data.size(); ++i)
      rgb.data[i] = T(view.rgb.data[i]);
    for (size_t i = 0; i < mask.data.size(); ++i)
      mask.data[i] = T(view.mask.data[i]);
    out.rgb[size_t(v)] = std::move(rgb);
    out.mask[size_t(v)] = std::move(mask);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Candidate index: per caption, the oracle masks and histograms per view.

struct caption_signature {
  std::string caption;
  std::array<image2d<uint8_t>, kRetrievalViews> masks;
  std::array<color_hist, kRetrievalViews> hists;
};

struct retrieval_index {
  int res = 0;
  std::vector<caption_signature> entries;
};

inline retrieval_index build_retrieval_index(
    const std::vector<std::string>& captions, int res) {
  check(!captions.empty() && res > 0, "index needs captions and a resolution");
  retrieval_index idx;
  idx.res = res;
  idx.entries.resize(captions.size());
  const auto cams = retrieval_cameras();
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t k = 0; k < int64_t(captions.size()); ++k) {
    caption_signature& sig = idx.entries[size_t(k)];
    sig.caption = captions[size_t(k)];
    const scene_spec scene = canonical_scene(sig.caption);
    for (int v = 0; v < kRetrievalViews; ++v) {
      // the oracle renderer's own parallel region nests here and serializes
      view_record view = render_oracle_view(scene, cams[size_t(v)], res, res);
      std::vector<uint8_t> on(view.mask.data.begin(), view.mask.data.end());
      sig.hists[size_t(v)] = color_histogram(view.rgb, on);
      sig.masks[size_t(v)] = std::move(view.mask);
    }
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Scoring and ranking

struct retrieval_result {
  int rank = 0;         // 1-based; ties count as not worse
  double true_score = 0;
  bool degenerate = false;  // empty silhouette in every probe view
  std::vector<double> scores;  // aligned with the index entries
};

template <scalar T>
double score_probe(const probe_views<T>& obj, const caption_signature& sig) {
  double acc = 0;
  for (int v = 0; v < kRetrievalViews; ++v) {
    const auto& mask = obj.mask[size_t(v)];
    std::vector<uint8_t> on(mask.data.size());
    for (size_t i = 0; i < on.size(); ++i) on[i] = mask.data[i] > T(0.5);
    const double iou = mask_iou(mask, sig.masks[size_t(v)]);
    const double hi = hist_intersection(color_histogram(obj.rgb[size_t(v)], on),
                                        sig.hists[size_t(v)]);
    acc += iou * hi;
  }
  return acc / double(kRetrievalViews);
}

template <scalar T>
retrieval_result rank_probe(const probe_views<T>& obj,
                            const retrieval_index& idx,
                            const std::string& true_caption) {
  check(obj.res == idx.res, "probe and index resolutions must match");
  retrieval_result out;
  out.scores.resize(idx.entries.size());
  int64_t true_at = -1;
  for (size_t k = 0; k < idx.entries.size(); ++k) {
    out.scores[k] = score_probe(obj, idx.entries[k]);
    if (idx.entries[k].caption == true_caption) true_at = int64_t(k);
  }
  check(true_at >= 0, "true caption missing from the candidate list");
  out.true_score = out.scores[size_t(true_at)];

  bool any_pixel = false;
  for (const auto& mask : obj.mask)
    for (const T v : mask.data) any_pixel |= (v > T(0.5));
  out.degenerate = !any_pixel;
  if (out.degenerate) {
    out.rank = int(idx.entries.size());  // worst rank: nothing to compare
    return out;
  }
  int better = 0;
  for (double s : out.scores) better += (s > out.true_score);
  out.rank = 1 + better;
  return out;
}

template <scalar T>
retrieval_result retrieve_caption(const triplane_grid<T>& tp,
                                  const decoder_params<T>& dec,
                                  const std::string& true_caption,
                                  const retrieval_index& idx, int n_samples) {
  const auto obj = render_probe_views(tp, dec, idx.res, n_samples);
  return rank_probe(obj, idx, true_caption);
}

struct retrieval_summary {
  double r_at_1 = 0, r_at_10 = 0;
  int evaluated = 0, degenerate = 0;
};

inline retrieval_summary summarize_retrieval(
    const std::vector<retrieval_result>& results) {
  retrieval_summary s;
  s.evaluated = int(results.size());
  if (results.empty()) return s;
  int hit1 = 0, hit10 = 0;
  for (const auto& r : results) {
    s.degenerate += r.degenerate;
    hit1 += (!r.degenerate && r.rank <= 1);
    hit10 += (!r.degenerate && r.rank <= 10);
  }
  s.r_at_1 = double(hit1) / double(results.size());
  s.r_at_10 = double(hit10) / double(results.size());
  return s;
}

}  // namespace pi3d
