#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "pi3d/triplane.h"

using namespace pi3d;

TEST_CASE("projection maps the box through plane conventions") {
  auto uv = project_point(0.3, -0.1, 0.4, 64, 64);
  CHECK(uv[0].u == doctest::Approx(world_to_texel(0.3, 64)).epsilon(1e-15));
  CHECK(uv[0].v == doctest::Approx(world_to_texel(-0.1, 64)).epsilon(1e-15));
  CHECK(uv[1].u == doctest::Approx(world_to_texel(0.3, 64)).epsilon(1e-15));
  CHECK(uv[1].v == doctest::Approx(world_to_texel(0.4, 64)).epsilon(1e-15));
  CHECK(uv[2].u == doctest::Approx(world_to_texel(-0.1, 64)).epsilon(1e-15));
  CHECK(uv[2].v == doctest::Approx(world_to_texel(0.4, 64)).epsilon(1e-15));

  auto center = project_point(0.0, 0.0, 0.0, 64, 64);
  for (int p = 0; p < 3; ++p) {
    CHECK(center[p].u == doctest::Approx(31.5).epsilon(1e-14));
    CHECK(center[p].v == doctest::Approx(31.5).epsilon(1e-14));
  }
  auto corner = project_point(-0.5, -0.5, -0.5, 64, 64);
  for (int p = 0; p < 3; ++p) {
    CHECK(corner[p].u == 0.0);
    CHECK(corner[p].v == 0.0);
  }
}

TEST_CASE("bilinear sampling on a 2x2 plane") {
  triplane_grid<double> tp(1, 2, 2);
  tp.at(0, 0, 0, 0) = 0;
  tp.at(0, 0, 0, 1) = 1;
  tp.at(0, 0, 1, 0) = 2;
  tp.at(0, 0, 1, 1) = 3;
  double out = -1;
  sample_plane(tp, 0, plane_uv<double>{0.5, 0.5}, &out);
  CHECK(out == doctest::Approx(1.5).epsilon(1e-15));
  sample_plane(tp, 0, plane_uv<double>{0.0, 0.0}, &out);
  CHECK(out == 0.0);
  sample_plane(tp, 0, plane_uv<double>{-3.0, -3.0}, &out);  // clamped to edge
  CHECK(out == 0.0);
  sample_plane(tp, 0, plane_uv<double>{5.0, 5.0}, &out);
  CHECK(out == 3.0);
}

TEST_CASE("bilinear sampling is exact on affine plane fields") {
  const int H = 16, W = 16;
  triplane_grid<double> tp(1, H, W);
  const double a = 0.7, b = -0.3, c = 0.45;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) tp.at(0, 0, i, j) = a + b * i + c * j;
  rng_stream rng(5);
  for (int n = 0; n < 200; ++n) {
    double u = rng.uniform(0, W - 1);
    double v = rng.uniform(0, H - 1);
    double out;
    sample_plane(tp, 0, plane_uv<double>{u, v}, &out);
    CHECK(out == doctest::Approx(a + b * v + c * u).epsilon(1e-12));
  }
}

TEST_CASE("feature vectors concatenate plane samples in order") {
  triplane_grid<double> zero(6, 8, 8);
  double feat[kFeatDim];
  sample_features(zero, 0.1, 0.2, -0.3, feat);
  for (double f : feat) CHECK(f == 0.0);

  triplane_grid<double> ones(6, 8, 8);
  for (int c = 0; c < 6; ++c)
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) ones.at(0, c, i, j) = 1.0;
  sample_features(ones, 0.1, 0.2, -0.3, feat);
  for (int k = 0; k < 6; ++k) CHECK(feat[k] == doctest::Approx(1.0));
  for (int k = 6; k < 18; ++k) CHECK(feat[k] == 0.0);

  triplane_grid<double> tp = random_triplane<double>(8, 8, 9, 1.0);
  sample_features(tp, 0.1, 0.2, -0.3, feat);
  auto uv = project_point(0.1, 0.2, -0.3, 8, 8);
  double direct[6];
  sample_plane(tp, 0, uv[0], direct);
  for (int c = 0; c < 6; ++c) CHECK(feat[c] == direct[c]);
}

TEST_CASE("feature gradients match finite differences") {
  triplane_grid<double> tp = random_triplane<double>(12, 12, 17, 0.5);
  rng_stream rng(23);
  for (int n = 0; n < 100; ++n) {
    double x = rng.uniform(-0.55, 0.55);  // includes clamped territory
    double y = rng.uniform(-0.55, 0.55);
    double z = rng.uniform(-0.55, 0.55);
    double dfeat[kFeatDim];
    for (double& d : dfeat) d = rng.next_normal();
    std::vector<double> grad(tp.data.size(), 0.0);
    scatter_feature_grad(tp, x, y, z, dfeat, grad.data());
    // directional check on one random texel
    size_t idx = size_t(rng.uniform_int(0, int64_t(tp.data.size()) - 1));
    const double h = 1e-6;
    auto weighted = [&] {
      double f[kFeatDim];
      sample_features(tp, x, y, z, f);
      double s = 0;
      for (int k = 0; k < kFeatDim; ++k) s += f[k] * dfeat[k];
      return s;
    };
    double keep = tp.data[idx];
    tp.data[idx] = keep + h;
    double up = weighted();
    tp.data[idx] = keep - h;
    double dn = weighted();
    tp.data[idx] = keep;
    double fd = (up - dn) / (2 * h);
    CHECK(grad[idx] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("texels outside the bilinear support get exactly zero gradient") {
  triplane_grid<double> tp(6, 16, 16);
  double dfeat[kFeatDim];
  for (double& d : dfeat) d = 1.0;
  std::vector<double> grad(tp.data.size(), 0.0);
  scatter_feature_grad(tp, -0.5, -0.5, -0.5, dfeat, grad.data());
  // the corner point touches texels (0,0),(0,1),(1,0),(1,1) only
  CHECK(grad[0] != 0.0);
  for (int p = 0; p < 3; ++p)
    for (int c = 0; c < 6; ++c) {
      CHECK(tp.at(p, c, 8, 8) == 0.0);
      size_t base = (size_t(p) * 6 + c) * 16 * 16;
      CHECK(grad[base + 8 * 16 + 8] == 0.0);
      CHECK(grad[base + 15 * 16 + 15] == 0.0);
    }
}

TEST_CASE("pseudo-image packing is a bitwise bijection") {
  triplane_grid<float> tp = random_triplane<float>(32, 32, 4, 1.0f);
  auto stack = pack_pseudo_images(tp);
  CHECK(stack.size() == size_t(6) * 3 * 32 * 32);
  // image 2 is f_xz channels 0-2
  size_t img = size_t(3) * 32 * 32;
  CHECK(stack[2 * img] == tp.at(1, 0, 0, 0));
  CHECK(stack[2 * img + 5] == tp.at(1, 0, 0, 5));
  auto back = unpack_pseudo_images(stack, 32, 32);
  CHECK(back.data == tp.data);
  triplane_grid<float> bad(5, 32, 32);
  CHECK_THROWS(pack_pseudo_images(bad));
}

TEST_CASE("decoder activations at zero parameters") {
  decoder_params<double> dec;  // all zeros
  double feat[kFeatDim] = {};
  double rgb[3], sigma;
  decode_point(dec, feat, rgb, sigma);
  CHECK(rgb[0] == 0.5);
  CHECK(rgb[1] == 0.5);
  CHECK(rgb[2] == 0.5);
  CHECK(sigma == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("batched decoder equals single-point decode bitwise") {
  decoder_params<double> dec = init_decoder<double>(3);
  decoder_batch<double> batch;
  batch.resize(7);
  rng_stream rng(4);
  for (double& v : batch.x) v = rng.next_normal();
  decoder_forward(dec, batch);
  for (int i = 0; i < 7; ++i) {
    double rgb[3], sigma;
    decode_point(dec, batch.x.data() + i * kFeatDim, rgb, sigma);
    CHECK(rgb[0] == batch.rgb[i * 3 + 0]);
    CHECK(rgb[1] == batch.rgb[i * 3 + 1]);
    CHECK(rgb[2] == batch.rgb[i * 3 + 2]);
    CHECK(sigma == batch.sigma[i]);
  }
}

TEST_CASE("decoder jacobian matches central finite differences") {
  decoder_params<double> dec = init_decoder<double>(11);
  rng_stream rng(12);
  decoder_batch<double> b;
  b.resize(1);
  for (double& v : b.x) v = rng.next_normal();
  decoder_forward(dec, b);
  std::vector<double> scratch;
  const double h = 1e-4;

  for (int out = 0; out < 4; ++out) {
    double d_rgb[3] = {0, 0, 0};
    double d_sigma = 0;
    if (out < 3)
      d_rgb[out] = 1;
    else
      d_sigma = 1;
    decoder_params<double> dgrad;
    std::vector<double> dx(kFeatDim, 0.0);
    decoder_backward(dec, b, d_rgb, &d_sigma, dgrad, dx.data(), scratch);

    auto eval = [&](int which) {
      double rgb[3], sigma;
      decode_point(dec, b.x.data(), rgb, sigma);
      return which < 3 ? rgb[which] : sigma;
    };
    // a few random feature coordinates
    for (int rep = 0; rep < 6; ++rep) {
      int k = int(rng.uniform_int(0, kFeatDim - 1));
      double keep = b.x[k];
      b.x[k] = keep + h;
      double up = eval(out);
      b.x[k] = keep - h;
      double dn = eval(out);
      b.x[k] = keep;
      double fd = (up - dn) / (2 * h);
      CHECK(dx[k] == doctest::Approx(fd).epsilon(1e-5).scale(0.1));
    }
    // a few random parameters
    for (int rep = 0; rep < 8; ++rep) {
      int k = int(rng.uniform_int(0, decoder_params<double>::kTotal - 1));
      double keep = dec.data[k];
      dec.data[k] = keep + h;
      double up = eval(out);
      dec.data[k] = keep - h;
      double dn = eval(out);
      dec.data[k] = keep;
      double fd = (up - dn) / (2 * h);
      CHECK(dgrad.data[k] == doctest::Approx(fd).epsilon(1e-5).scale(0.1));
    }
  }
}

TEST_CASE("decoder outputs survive a hidden-unit permutation") {
  decoder_params<double> dec = init_decoder<double>(21);
  rng_stream rng(22);
  double feat[kFeatDim];
  for (double& f : feat) f = rng.next_normal();
  double rgb[3], sigma;
  decode_point(dec, feat, rgb, sigma);

  // rotate the layer-2 hidden units: permute columns of W2 and b2, rows of W3
  decoder_params<double> rot = dec;
  auto perm = [](int j) { return (j + 5) % kHidden; };
  for (int i = 0; i < kHidden; ++i)
    for (int j = 0; j < kHidden; ++j) {
      rot.w2()[i * kHidden + perm(j)] = dec.w2()[i * kHidden + j];
      rot.w3()[perm(j) * kHidden + i] = dec.w3()[j * kHidden + i];
    }
  for (int j = 0; j < kHidden; ++j) rot.b2()[perm(j)] = dec.b2()[j];
  double rgb2[3], sigma2;
  decode_point(rot, feat, rgb2, sigma2);
  for (int c = 0; c < 3; ++c)
    CHECK(rgb2[c] == doctest::Approx(rgb[c]).epsilon(1e-12));
  CHECK(sigma2 == doctest::Approx(sigma).epsilon(1e-12));
}

TEST_CASE("finalization clamps or rescales into the unit range") {
  triplane_grid<float> tp(6, 4, 4);
  tp.data[0] = 2.0f;
  tp.data[1] = -3.0f;
  tp.data[2] = 0.25f;
  triplane_grid<float> scaled = tp;
  finalize_report rep = finalize_triplane(tp, finalize_kind::clamp);
  CHECK(tp.data[0] == 1.0f);
  CHECK(tp.data[1] == -1.0f);
  CHECK(tp.data[2] == 0.25f);
  CHECK(rep.max_abs == doctest::Approx(3.0));
  CHECK(rep.inside_fraction ==
        doctest::Approx(1.0 - 2.0 / tp.data.size()).epsilon(1e-12));

  finalize_triplane(scaled, finalize_kind::rescale);
  CHECK(scaled.data[1] == doctest::Approx(-1.0f));
  CHECK(scaled.data[0] == doctest::Approx(2.0f / 3.0f));
  CHECK(scaled.data[2] == doctest::Approx(0.25f / 3.0f));
}
