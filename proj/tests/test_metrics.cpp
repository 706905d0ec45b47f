#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rayf/metrics.hpp"
#include "rayf/rng.hpp"

using namespace rayf;

namespace {

Array random_image(Rng& rng, std::size_t h, std::size_t w) {
  Array img({h, w, 3});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("psnr caps identical images at 99 dB") {
  Rng rng(1);
  const Array a = random_image(rng, 12, 12);
  CHECK(psnr(a, a) == 99.0);
}

TEST_CASE("psnr of a 0.1 uniform offset is exactly 20 dB") {
  Array a({12, 12, 3}, 0.4), b({12, 12, 3}, 0.5);
  CHECK(psnr(a, b) == Catch::Approx(20.0).epsilon(1e-12));
}

TEST_CASE("psnr of solid black vs solid white is 0 dB") {
  Array a({12, 12, 3}, 0.0), b({12, 12, 3}, 1.0);
  CHECK(psnr(a, b) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("psnr is symmetric and rejects shape mismatch") {
  Rng rng(2);
  const Array a = random_image(rng, 12, 14);
  const Array b = random_image(rng, 12, 14);
  CHECK(psnr(a, b) == psnr(b, a));
  const Array c = random_image(rng, 14, 12);
  CHECK_THROWS_AS(psnr(a, c), dimension_error);
}

TEST_CASE("ssim of an image with itself is exactly one") {
  Rng rng(3);
  const Array a = random_image(rng, 16, 16);
  CHECK(ssim(a, a) == 1.0);
}

TEST_CASE("ssim of an inverted checkerboard is negative") {
  Array a({16, 16, 3});
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        a(y, x, c) = double((y + x) % 2);
  Array b({16, 16, 3});
  for (std::size_t i = 0; i < a.numel(); ++i) b[i] = 1.0 - a[i];
  CHECK(ssim(a, b) < 0.0);
}

TEST_CASE("constant-shift ssim matches the scalar formula") {
  // constant images make every window identical, so the windowed result
  // must equal the single-point formula
  Array a({16, 16, 3}, 0.45), b({16, 16, 3}, 0.55);
  const double c1 = 1e-4, c2 = 9e-4;
  const double mu1 = 0.45, mu2 = 0.55;
  const double expected = ((2 * mu1 * mu2 + c1) * c2) /
                          ((mu1 * mu1 + mu2 * mu2 + c1) * c2);
  CHECK(ssim(a, b) == Catch::Approx(expected).margin(1e-9));
}

TEST_CASE("ssim is symmetric and bounded") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Array a = random_image(rng, 13, 15);
    const Array b = random_image(rng, 13, 15);
    const double s = ssim(a, b);
    CHECK(s == ssim(b, a));
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("images below the window size are rejected") {
  Array a({10, 16, 3}), b({10, 16, 3});
  CHECK_THROWS_AS(ssim(a, b), config_error);
}

TEST_CASE("frame report aggregates means and formats output") {
  Rng rng(5);
  Array recon({2, 16, 16, 3}), gt({2, 16, 16, 3});
  for (std::size_t i = 0; i < recon.numel(); ++i) {
    gt[i] = rng.uniform();
    recon[i] = gt[i];
  }
  // second frame offset by 0.1 -> psnr 20
  const std::size_t stride = 16 * 16 * 3;
  for (std::size_t k = 0; k < stride; ++k)
    recon[stride + k] = std::clamp(gt[stride + k], 0.05, 0.85) + 0.1;
  for (std::size_t k = 0; k < stride; ++k)
    gt[stride + k] = std::clamp(gt[stride + k], 0.05, 0.85);
  const MetricReport report = evaluate_frames(recon, gt);
  REQUIRE(report.frame_psnr.size() == 2);
  CHECK(report.frame_psnr[0] == 99.0);
  CHECK(report.frame_psnr[1] == Catch::Approx(20.0).epsilon(1e-9));
  CHECK(report.frame_ssim[0] == 1.0);
  CHECK(report.mean_psnr() ==
        Catch::Approx((99.0 + report.frame_psnr[1]) / 2).epsilon(1e-12));
  const std::string csv = report.to_csv();
  CHECK(csv.find("frame,psnr,ssim") == 0);
  CHECK(csv.find("mean,") != std::string::npos);
}
