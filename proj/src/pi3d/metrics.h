#pragma once

// Image-space quality metrics for fitted and sampled objects.

#include <cmath>

#include "common.h"
#include "scene.h"

namespace pi3d {

// PSNR over all pixels and channels against [0,1] images.
template <scalar T>
double psnr(const image2d<T>& pred, const image2d<float>& target) {
  check(pred.h == target.h && pred.w == target.w && pred.ch == target.ch,
        "psnr shape mismatch");
  double mse = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    double d = double(pred.data[i]) - double(target.data[i]);
    mse += d * d;
  }
  mse /= double(pred.data.size());
  if (mse <= 0) return 99.0;  // identical images; cap instead of infinity
  return 10.0 * std::log10(1.0 / mse);
}

// Silhouette intersection-over-union; predictions threshold at 0.5.
template <scalar T>
double mask_iou(const image2d<T>& pred, const image2d<uint8_t>& target) {
  check(pred.h == target.h && pred.w == target.w, "iou shape mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    bool p = pred.data[i] > T(0.5);
    bool t = target.data[i] != 0;
    inter += p && t;
    uni += p || t;
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

// Mean absolute depth error over the target's object pixels.
template <scalar T>
double depth_mae(const image2d<T>& pred, const image2d<float>& target_depth,
                 const image2d<uint8_t>& target_mask) {
  check(pred.h == target_depth.h && pred.w == target_depth.w,
        "depth shape mismatch");
  double err = 0;
  int64_t n = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    if (!target_mask.data[i]) continue;
    err += std::abs(double(pred.data[i]) - double(target_depth.data[i]));
    ++n;
  }
  return n == 0 ? 0.0 : err / double(n);
}

}  // namespace pi3d
