#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "pi3d/retrieval.h"

using namespace pi3d;

TEST_CASE("retrieval cameras orbit at fixed elevation") {
  const auto cams = retrieval_cameras();
  const double elev = 15.0 * 3.14159265358979323846 / 180.0;
  for (const auto& cam : cams) {
    CHECK(cam.position.y == doctest::Approx(kCamDistance * std::sin(elev)));
    const double xz = std::sqrt(cam.position.x * cam.position.x +
                                cam.position.z * cam.position.z);
    CHECK(xz == doctest::Approx(kCamDistance * std::cos(elev)));
    CHECK(cam.look_at.x == 0);
    CHECK(cam.look_at.y == 0);
    CHECK(cam.look_at.z == 0);
  }
  // consecutive azimuths are orthogonal in the xz plane
  for (int v = 0; v < kRetrievalViews; ++v) {
    const auto& a = cams[size_t(v)].position;
    const auto& b = cams[size_t((v + 1) % kRetrievalViews)].position;
    CHECK(a.x * b.x + a.z * b.z == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("color histograms count masked pixels into the right cells") {
  image2d<float> img(4, 4, 3);
  std::vector<uint8_t> on(16, 0);
  // two red pixels, one green, one excluded white
  auto set = [&](int i, int j, float r, float g, float b, bool m) {
    img.at(i, j, 0) = r;
    img.at(i, j, 1) = g;
    img.at(i, j, 2) = b;
    on[size_t(i) * 4 + j] = m;
  };
  set(0, 0, 1, 0, 0, true);
  set(0, 1, 1, 0, 0, true);
  set(1, 0, 0, 1, 0, true);
  set(2, 2, 1, 1, 1, false);

  const auto h = color_histogram(img, on);
  const int red_cell = ((kHistBins - 1) * kHistBins + 0) * kHistBins + 0;
  const int green_cell = (0 * kHistBins + (kHistBins - 1)) * kHistBins + 0;
  CHECK(h[size_t(red_cell)] == doctest::Approx(2.0 / 3.0));
  CHECK(h[size_t(green_cell)] == doctest::Approx(1.0 / 3.0));
  double total = 0;
  for (double v : h) total += v;
  CHECK(total == doctest::Approx(1.0));

  CHECK(hist_intersection(h, h) == doctest::Approx(1.0));

  // disjoint colors do not intersect
  image2d<float> red(2, 2, 3), green(2, 2, 3);
  std::vector<uint8_t> all(4, 1);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      red.at(i, j, 0) = 1;
      green.at(i, j, 1) = 1;
    }
  CHECK(hist_intersection(color_histogram(red, all),
                          color_histogram(green, all)) == 0.0);

  // empty mask -> all-zero histogram
  std::vector<uint8_t> none(16, 0);
  for (double v : color_histogram(img, none)) CHECK(v == 0.0);
}

TEST_CASE("oracle renders retrieve their own caption at rank 1") {
  const int res = 32;
  const auto captions = enumerate_captions();
  REQUIRE(int(captions.size()) == 420);
  const auto idx = build_retrieval_index(captions, res);
  REQUIRE(idx.entries.size() == captions.size());

  const std::vector<std::string> probes = {
      "red sphere",
      "white torus",
      "green cube on blue cylinder",
      "yellow sphere on yellow sphere",
      "blue cylinder on red cube",
      "white torus on green sphere",
  };
  for (const auto& cap : probes) {
    const auto obj = oracle_probe_views<float>(canonical_scene(cap), res);
    const auto r = rank_probe(obj, idx, cap);
    CHECK(!r.degenerate);
    CHECK(r.true_score == doctest::Approx(1.0));
    CHECK(r.rank == 1);
  }
}

TEST_CASE("empty silhouettes are flagged and ranked last") {
  const int res = 16;
  auto tp = random_triplane<float>(8, 8, 3, 0.05f);
  auto dec = init_decoder<float>(5);
  dec.data[decoder_params<float>::kB4 + 3] = -30.0f;  // kill all density

  std::vector<std::string> captions = {"red sphere", "green cube",
                                       "blue torus"};
  const auto idx = build_retrieval_index(captions, res);
  const auto r = retrieve_caption(tp, dec, "green cube", idx, 16);
  CHECK(r.degenerate);
  CHECK(r.rank == int(captions.size()));
}

TEST_CASE("rank does not depend on candidate order") {
  const int res = 24;
  auto all = enumerate_captions();
  std::vector<std::string> candidates(all.begin(), all.begin() + 30);
  const std::string truth = "red sphere on green cube";
  candidates.push_back(truth);

  // a probe that is not an exact canonical render: a different stacked scene
  const auto obj =
      oracle_probe_views<float>(canonical_scene("red cube on green cube"), res);

  const auto idx1 = build_retrieval_index(candidates, res);
  const auto r1 = rank_probe(obj, idx1, truth);

  std::vector<std::string> shuffled = candidates;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[3], shuffled[17]);
  const auto idx2 = build_retrieval_index(shuffled, res);
  const auto r2 = rank_probe(obj, idx2, truth);

  CHECK(r1.rank == r2.rank);
  CHECK(r1.true_score == r2.true_score);
  CHECK(!r1.degenerate);
}

TEST_CASE("summary aggregates ranks and degenerates") {
  std::vector<retrieval_result> rs(4);
  rs[0].rank = 1;
  rs[1].rank = 7;
  rs[2].rank = 40;
  rs[3].rank = 3;
  rs[3].degenerate = true;  // excluded from recall credit
  const auto s = summarize_retrieval(rs);
  CHECK(s.evaluated == 4);
  CHECK(s.degenerate == 1);
  CHECK(s.r_at_1 == doctest::Approx(0.25));
  CHECK(s.r_at_10 == doctest::Approx(0.5));
  const auto empty = summarize_retrieval({});
  CHECK(empty.evaluated == 0);
  CHECK(empty.r_at_1 == 0.0);
}

TEST_CASE("index build and scoring are identical across execution modes") {
  const int res = 16;
  std::vector<std::string> captions = {"red sphere", "green cube",
                                       "blue torus", "white cylinder",
                                       "yellow sphere on red cube"};
  const auto obj =
      oracle_probe_views<float>(canonical_scene("green cube"), res);

  const auto idx_p = build_retrieval_index(captions, res);
  const auto r_p = rank_probe(obj, idx_p, "green cube");

  set_exec_mode(exec_mode::serial);
  const auto idx_s = build_retrieval_index(captions, res);
  const auto r_s = rank_probe(obj, idx_s, "green cube");
  set_exec_mode(exec_mode::parallel);

  REQUIRE(r_p.scores.size() == r_s.scores.size());
  for (size_t i = 0; i < r_p.scores.size(); ++i)
    CHECK(r_p.scores[i] == r_s.scores[i]);
  CHECK(r_p.rank == r_s.rank);
  CHECK(r_p.rank == 1);
}
