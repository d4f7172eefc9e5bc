#pragma once

// In-memory supervision data for one object: oracle-rendered views split into
// train/held-out, hull masks at triplane resolution, and the caption. The
// generator is pure in (spec, seed); file persistence lives in formats.h.

#include <string>
#include <vector>

#include "common.h"
#include "scene.h"

namespace pi3d {

struct object_views {
  scene_spec scene;
  std::string caption;
  std::vector<view_record> train;
  std::vector<view_record> heldout;
  hull_masks hulls;
  int img_h = 0, img_w = 0;
};

inline object_views make_object_views(const scene_spec& s, int n_train,
                                      int n_heldout, int img_h, int img_w,
                                      int tp_res, uint64_t seed) {
  validate_scene(s);
  object_views out;
  out.scene = s;
  out.caption = caption_for(s);
  out.img_h = img_h;
  out.img_w = img_w;
  out.hulls = make_hull_masks(s, tp_res, tp_res, 1);
  out.train.reserve(n_train);
  out.heldout.reserve(n_heldout);
  for (int v = 0; v < n_train + n_heldout; ++v) {
    rng_stream rng(hash_mix(seed, 0x76696577u, uint64_t(v)));
    camera_pose cam = sample_camera(rng);
    view_record view = render_oracle_view(s, cam, img_h, img_w);
    (v < n_train ? out.train : out.heldout).push_back(std::move(view));
  }
  return out;
}

}  // namespace pi3d
