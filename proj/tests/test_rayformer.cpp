#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "rayf/network.hpp"

using namespace rayf;

namespace {

using Md = Mat<double>;
using Vd = Vec<double>;

Md random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Md m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Naive per-pair attention used as the oracle: explicit loops, no matrix
// products, softmax written out by hand.
Md attention_loops(const Md& q, const Md& k, const Md& v, int heads) {
  const Eigen::Index n = q.rows(), c = q.cols();
  const Eigen::Index ch = c / heads;
  Md out(n, c);
  for (int h = 0; h < heads; ++h) {
    for (Eigen::Index i = 0; i < n; ++i) {
      std::vector<double> logits(static_cast<std::size_t>(n));
      double max_logit = -1e300;
      for (Eigen::Index j = 0; j < n; ++j) {
        double dot = 0.0;
        for (Eigen::Index d = 0; d < ch; ++d)
          dot += q(i, h * ch + d) * k(j, h * ch + d);
        logits[std::size_t(j)] = dot / std::sqrt(double(ch));
        max_logit = std::max(max_logit, logits[std::size_t(j)]);
      }
      double denom = 0.0;
      for (Eigen::Index j = 0; j < n; ++j)
        denom += std::exp(logits[std::size_t(j)] - max_logit);
      for (Eigen::Index d = 0; d < ch; ++d) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < n; ++j)
          acc += std::exp(logits[std::size_t(j)] - max_logit) / denom *
                 v(j, h * ch + d);
        out(i, h * ch + d) = acc;
      }
    }
  }
  return out;
}

// Monolithic reference for the dual-path attention: materializes both paths
// with explicit loops and regroups by index arithmetic only.
Md i2r_msa_reference(const Md& x, const BlockParams<double>& bp,
                     const I2RConfig& cfg) {
  const int P = cfg.pixels_per_window();
  const int L = cfg.l_samples;
  const int B = int(x.rows() / (Eigen::Index(P) * L));
  const Eigen::Index C = cfg.channels;
  const Eigen::Index half = C / 2;

  Md q = (x * bp.q.W).rowwise() + bp.q.b.transpose();
  Md k = (x * bp.k.W).rowwise() + bp.k.b.transpose();
  Md v = (x * bp.v.W).rowwise() + bp.v.b.transpose();

  Md concat(x.rows(), C);
  // intra path: one group per (window, pixel)
  for (int w = 0; w < B; ++w) {
    for (int p = 0; p < P; ++p) {
      Md qg(L, half), kg(L, half), vg(L, half);
      for (int j = 0; j < L; ++j) {
        const Eigen::Index tok = (Eigen::Index(w) * P + p) * L + j;
        qg.row(j) = q.row(tok).head(half);
        kg.row(j) = k.row(tok).head(half);
        vg.row(j) = v.row(tok).head(half);
      }
      const Md og = attention_loops(qg, kg, vg, cfg.heads_per_path);
      for (int j = 0; j < L; ++j) {
        const Eigen::Index tok = (Eigen::Index(w) * P + p) * L + j;
        concat.row(tok).head(half) = og.row(j);
      }
    }
  }
  // inter path: one group per (window, depth)
  for (int w = 0; w < B; ++w) {
    for (int j = 0; j < L; ++j) {
      Md qg(P, half), kg(P, half), vg(P, half);
      for (int p = 0; p < P; ++p) {
        const Eigen::Index tok = (Eigen::Index(w) * P + p) * L + j;
        qg.row(p) = q.row(tok).tail(half);
        kg.row(p) = k.row(tok).tail(half);
        vg.row(p) = v.row(tok).tail(half);
      }
      const Md og = attention_loops(qg, kg, vg, cfg.heads_per_path);
      for (int p = 0; p < P; ++p) {
        const Eigen::Index tok = (Eigen::Index(w) * P + p) * L + j;
        concat.row(tok).tail(half) = og.row(p);
      }
    }
  }
  return ((concat * bp.o.W).rowwise() + bp.o.b.transpose()).eval();
}

BlockParams<double> random_block(Rng& rng, int C) {
  BlockParams<double> bp;
  bp.q = LinearParam<double>::init(C, C, rng);
  bp.k = LinearParam<double>::init(C, C, rng);
  bp.v = LinearParam<double>::init(C, C, rng);
  bp.o = LinearParam<double>::init(C, C, rng);
  bp.ln1_g = Vd::Ones(C);
  bp.ln1_b = Vd::Zero(C);
  bp.ln2_g = Vd::Ones(C);
  bp.ln2_b = Vd::Zero(C);
  bp.ffn1 = LinearParam<double>::init(C, 2 * C, rng);
  bp.ffn2 = LinearParam<double>::init(2 * C, C, rng);
  return bp;
}

}  // namespace

TEST_CASE("half split divides channels and concatenation inverts it") {
  Md x(2, 4);
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  auto [a, b] = half_split<double>(x);
  CHECK(a(0, 0) == 1);
  CHECK(a(0, 1) == 2);
  CHECK(b(0, 0) == 3);
  CHECK(b(0, 1) == 4);
  Md back(2, 4);
  back << a, b;
  CHECK((back - x).cwiseAbs().maxCoeff() == 0.0);
  // means of the halves recombine to the full mean
  const double mean = (a.sum() + b.sum()) / double(x.size());
  CHECK(mean == Catch::Approx(x.mean()).epsilon(1e-15));
}

TEST_CASE("half split rejects odd channel counts") {
  Md x(2, 3);
  x.setZero();
  CHECK_THROWS_AS(half_split<double>(x), numeric_error);
}

TEST_CASE("regroup index maps match the documented coordinates") {
  const int B = 3, P = 16, L = 8, c = 2;
  Md x(Eigen::Index(B) * P * L, c);
  for (int w = 0; w < B; ++w)
    for (int p = 0; p < P; ++p)
      for (int j = 0; j < L; ++j) {
        const Eigen::Index tok = (Eigen::Index(w) * P + p) * L + j;
        x(tok, 0) = w * 10000 + p * 100 + j;
        x(tok, 1) = tok;
      }
  const auto intra = regroup_intra<double>(x, B, P, L);
  const auto inter = regroup_inter<double>(x, B, P, L);
  for (int w = 0; w < B; ++w)
    for (int p = 0; p < P; ++p)
      for (int j = 0; j < L; ++j) {
        const double tag = w * 10000 + p * 100 + j;
        const auto [gi, ti] = intra_coords(w, p, j, P, L);
        CHECK(intra[std::size_t(gi)](ti, 0) == tag);
        const auto [gj, tj] = inter_coords(w, p, j, P, L);
        CHECK(inter[std::size_t(gj)](tj, 0) == tag);
      }
  // element (window 2, pixel 5, depth 7)
  CHECK(intra[2 * 16 + 5](7, 0) == 2 * 10000 + 5 * 100 + 7);
  CHECK(inter[2 * 8 + 7](5, 0) == 2 * 10000 + 5 * 100 + 7);

  // bijectivity, bit exact
  const Md xa = regroup_intra_inverse<double>(intra, B, P, L);
  const Md xb = regroup_inter_inverse<double>(inter, B, P, L);
  CHECK((xa - x).cwiseAbs().maxCoeff() == 0.0);
  CHECK((xb - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("degenerate regroupings are identity up to axis labels") {
  Rng rng(1);
  {
    const Md x = random_mat(rng, 6, 4);  // B=1, P=1, L=6
    const auto intra = regroup_intra<double>(x, 1, 1, 6);
    REQUIRE(intra.size() == 1);
    CHECK((intra[0] - x).cwiseAbs().maxCoeff() == 0.0);
  }
  {
    const Md x = random_mat(rng, 5, 4);  // B=1, P=5, L=1
    const auto inter = regroup_inter<double>(x, 1, 5, 1);
    REQUIRE(inter.size() == 1);
    CHECK((inter[0] - x).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("singleton attention returns V exactly") {
  Rng rng(2);
  const Md q = random_mat(rng, 1, 4), k = random_mat(rng, 1, 4),
           v = random_mat(rng, 1, 4);
  Md out;
  msa_contiguous<double>(q, k, v, 1, 2, out, nullptr, "test");
  CHECK((out - v).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("identical keys average V uniformly") {
  Rng rng(3);
  const int n = 5;
  Md q = random_mat(rng, n, 4);
  Md k(n, 4);
  for (int i = 0; i < n; ++i) k.row(i) = Md::Ones(1, 4) * 0.37;
  const Md v = random_mat(rng, n, 4);
  Md out;
  msa_contiguous<double>(q, k, v, n, 2, out, nullptr, "test");
  const Md mean = v.colwise().mean();
  for (int i = 0; i < n; ++i)
    CHECK((out.row(i) - mean).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("grouped attention matches the double-loop oracle") {
  Rng rng(4);
  const int groups = 2, tokens = 3, c = 4;
  std::vector<Md> q, k, v;
  for (int g = 0; g < groups; ++g) {
    q.push_back(random_mat(rng, tokens, c));
    k.push_back(random_mat(rng, tokens, c));
    v.push_back(random_mat(rng, tokens, c));
  }
  const auto out = msa_groups<double>(q, k, v, 2);
  for (int g = 0; g < groups; ++g) {
    const Md ref = attention_loops(q[std::size_t(g)], k[std::size_t(g)],
                                   v[std::size_t(g)], 2);
    CHECK((out[std::size_t(g)] - ref).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("non-finite logits raise a numeric error naming the group") {
  Md q(2, 2), k(2, 2), v(2, 2);
  q.setOnes();
  k.setOnes();
  v.setOnes();
  q(1, 0) = std::numeric_limits<double>::quiet_NaN();
  Md out;
  try {
    msa_contiguous<double>(q, k, v, 1, 1, out, nullptr, "intra");
    FAIL("expected numeric_error");
  } catch (const numeric_error& e) {
    CHECK(std::string(e.what()).find("group 1") != std::string::npos);
    CHECK(std::string(e.what()).find("intra") != std::string::npos);
  }
}

TEST_CASE("single-token dual-path attention is the projected value row") {
  Rng rng(5);
  I2RConfig cfg;
  cfg.channels = 8;
  cfg.heads_per_path = 2;
  cfg.l_samples = 1;
  cfg.win_h = 1;
  cfg.win_w = 1;
  BlockParams<double> bp = random_block(rng, 8);
  const Md x = random_mat(rng, 1, 8);
  Md out;
  i2r_msa<double>(x, bp, cfg, out, nullptr);
  const Md v = (x * bp.v.W).rowwise() + bp.v.b.transpose();
  const Md expected = (v * bp.o.W).rowwise() + bp.o.b.transpose();
  CHECK((out - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dual-path attention matches the monolithic loop reference") {
  Rng rng(6);
  struct Shape {
    int B, P_h, P_w, L, C;
  };
  for (const auto& s : {Shape{1, 2, 2, 4, 8}, Shape{2, 4, 2, 3, 16},
                        Shape{3, 4, 4, 8, 32}}) {
    I2RConfig cfg;
    cfg.channels = s.C;
    cfg.heads_per_path = 2;
    cfg.l_samples = s.L;
    cfg.win_h = s.P_h;
    cfg.win_w = s.P_w;
    BlockParams<double> bp = random_block(rng, s.C);
    const Md x =
        random_mat(rng, Eigen::Index(s.B) * s.P_h * s.P_w * s.L, s.C);
    Md out;
    i2r_msa<double>(x, bp, cfg, out, nullptr);
    const Md ref = i2r_msa_reference(x, bp, cfg);
    CHECK((out - ref).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("permuting pixels within every window permutes outputs") {
  Rng rng(7);
  I2RConfig cfg;
  cfg.channels = 16;
  cfg.l_samples = 4;
  cfg.win_h = 2;
  cfg.win_w = 2;
  const int B = 2, P = 4, L = 4;
  BlockParams<double> bp = random_block(rng, 16);
  const Md x = random_mat(rng, Eigen::Index(B) * P * L, 16);

  const int perm[4] = {2, 0, 3, 1};
  Md xp(x.rows(), x.cols());
  for (int w = 0; w < B; ++w)
    for (int p = 0; p < P; ++p)
      for (int j = 0; j < L; ++j)
        xp.row((Eigen::Index(w) * P + perm[p]) * L + j) =
            x.row((Eigen::Index(w) * P + p) * L + j);

  Md out, outp;
  i2r_msa<double>(x, bp, cfg, out, nullptr);
  i2r_msa<double>(xp, bp, cfg, outp, nullptr);
  for (int w = 0; w < B; ++w)
    for (int p = 0; p < P; ++p)
      for (int j = 0; j < L; ++j) {
        const auto moved = outp.row((Eigen::Index(w) * P + perm[p]) * L + j);
        const auto orig = out.row((Eigen::Index(w) * P + p) * L + j);
        CHECK((moved - orig).cwiseAbs().maxCoeff() < 1e-12);
      }
}

TEST_CASE("windows are independent groups") {
  Rng rng(8);
  I2RConfig cfg;
  cfg.channels = 16;
  cfg.l_samples = 4;
  cfg.win_h = 2;
  cfg.win_w = 2;
  const int B = 3, P = 4, L = 4;
  BlockParams<double> bp = random_block(rng, 16);
  Md x = random_mat(rng, Eigen::Index(B) * P * L, 16);
  Md out0;
  i2r_msa<double>(x, bp, cfg, out0, nullptr);
  x.row(1 * P * L + 5) += Md::Ones(1, 16);  // poke window 1
  Md out1;
  i2r_msa<double>(x, bp, cfg, out1, nullptr);
  // windows 0 and 2 bit-identical
  CHECK((out0.topRows(P * L) - out1.topRows(P * L)).cwiseAbs().maxCoeff() ==
        0.0);
  CHECK((out0.bottomRows(P * L) - out1.bottomRows(P * L))
            .cwiseAbs()
            .maxCoeff() == 0.0);
  // window 1 actually changed
  CHECK((out0.middleRows(P * L, P * L) - out1.middleRows(P * L, P * L))
            .cwiseAbs()
            .maxCoeff() > 0.0);
}

TEST_CASE("with the inter value path zeroed, a poke stays on its ray") {
  Rng rng(9);
  I2RConfig cfg;
  cfg.channels = 16;
  cfg.l_samples = 4;
  cfg.win_h = 2;
  cfg.win_w = 2;
  const int P = 4, L = 4;
  BlockParams<double> bp = random_block(rng, 16);
  bp.v.W.rightCols(8).setZero();  // kill the inter half of V
  bp.v.b.tail(8).setZero();
  Md x = random_mat(rng, Eigen::Index(P) * L, 16);
  Md out0;
  i2r_msa<double>(x, bp, cfg, out0, nullptr);
  const int ray = 2, depth = 1;
  x.row(Eigen::Index(ray) * L + depth) += Md::Ones(1, 16);
  Md out1;
  i2r_msa<double>(x, bp, cfg, out1, nullptr);
  for (int p = 0; p < P; ++p) {
    const double diff = (out0.middleRows(Eigen::Index(p) * L, L) -
                         out1.middleRows(Eigen::Index(p) * L, L))
                            .cwiseAbs()
                            .maxCoeff();
    if (p == ray)
      CHECK(diff > 0.0);
    else
      CHECK(diff == 0.0);
  }
}

TEST_CASE("zeroed output projections make the block an identity map") {
  Rng rng(10);
  I2RConfig cfg;
  cfg.channels = 16;
  cfg.l_samples = 4;
  cfg.win_h = 2;
  cfg.win_w = 2;
  BlockParams<double> bp = random_block(rng, 16);
  bp.o.W.setZero();
  bp.o.b.setZero();
  bp.ffn2.W.setZero();
  bp.ffn2.b.setZero();
  const Md x = random_mat(rng, 16, 16);
  Md out;
  block_forward<double>(x, bp, cfg, out, nullptr);
  CHECK((out - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("blocks preserve shape for assorted configurations") {
  Rng rng(11);
  for (int C : {8, 16, 32}) {
    I2RConfig cfg;
    cfg.channels = C;
    cfg.l_samples = 3;
    cfg.win_h = 2;
    cfg.win_w = 3;
    BlockParams<double> bp = random_block(rng, C);
    const Md x = random_mat(rng, 2 * 6 * 3, C);
    Md out;
    block_forward<double>(x, bp, cfg, out, nullptr);
    CHECK(out.rows() == x.rows());
    CHECK(out.cols() == x.cols());
  }
}

TEST_CASE("zero heads give the activation-at-zero outputs") {
  I2RConfig cfg;
  cfg.l_samples = 4;
  cfg.win_h = 2;
  cfg.win_w = 2;
  HashGridConfig grid_cfg;
  SHConfig sh_cfg;
  NetworkParams<double> params =
      NetworkParams<double>::shaped(cfg, grid_cfg, sh_cfg);  // all zeros
  const int tokens = 16;
  Md positions(tokens, 3);
  Rng rng(12);
  for (Eigen::Index i = 0; i < positions.size(); ++i)
    positions.data()[i] = rng.uniform();
  Md dirs(4, 3);
  for (int r = 0; r < 4; ++r) {
    Eigen::Vector3d d(rng.normal(), rng.normal(), rng.normal());
    d.normalize();
    dirs(r, 0) = d.x();
    dirs(r, 1) = d.y();
    dirs(r, 2) = d.z();
  }
  NetOutput<double> out;
  net_forward<double>(params, positions, dirs, out, nullptr);
  for (int t = 0; t < tokens; ++t) {
    CHECK(out.sigma(t) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    for (int c = 0; c < 3; ++c)
      CHECK(out.rgb(t, c) == Catch::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("density is non-negative across random parameter draws") {
  I2RConfig cfg;
  cfg.l_samples = 2;
  cfg.win_h = 2;
  cfg.win_w = 1;
  HashGridConfig grid_cfg;
  grid_cfg.table_size_log2 = 8;
  SHConfig sh_cfg;
  Rng rng(13);
  for (int draw = 0; draw < 50; ++draw) {
    NetworkParams<double> params = NetworkParams<double>::init(
        cfg, grid_cfg, sh_cfg, rng.next_u64());
    // scale weights up to stress the activation
    params.density.W *= 5.0;
    Md positions(4, 3), dirs(2, 3);
    for (Eigen::Index i = 0; i < positions.size(); ++i)
      positions.data()[i] = rng.uniform();
    for (int r = 0; r < 2; ++r) {
      Eigen::Vector3d d(rng.normal(), rng.normal(), rng.normal());
      d.normalize();
      dirs.row(r) << d.x(), d.y(), d.z();
    }
    NetOutput<double> out;
    net_forward<double>(params, positions, dirs, out, nullptr);
    CHECK(out.sigma.minCoeff() >= 0.0);
    CHECK(out.rgb.minCoeff() >= 0.0);
    CHECK(out.rgb.maxCoeff() <= 1.0);
  }
}

TEST_CASE("parameter census matches the closed-form count") {
  I2RConfig cfg;  // defaults: C=32, 2 blocks, geo 15
  cfg.l_samples = 32;
  HashGridConfig grid_cfg;  // 8 levels, 2^14 x 2
  SHConfig sh_cfg;          // degree 3 -> 16
  NetworkParams<double> params =
      NetworkParams<double>::shaped(cfg, grid_cfg, sh_cfg);

  const std::size_t grid = 8u * 16384u * 2u;
  const std::size_t proj_in = 16u * 32u + 32u;
  const std::size_t per_block = 4u * (32u * 32u + 32u)  // q, k, v, o
                                + 2u * (32u + 32u)      // two layer norms
                                + (32u * 64u + 64u)     // ffn expand
                                + (64u * 32u + 32u);    // ffn contract
  const std::size_t density = 32u * 16u + 16u;
  const std::size_t color = (31u * 32u + 32u) + (32u * 3u + 3u);
  const std::size_t poses = 12u;
  const std::size_t expected =
      grid + proj_in + 2u * per_block + density + color + poses;

  CHECK(parameter_census(params) == expected);
  CHECK(expected == 281439u);
}

TEST_CASE("ablation switches reduce a path to its value half") {
  Rng rng(14);
  I2RConfig cfg;
  cfg.channels = 16;
  cfg.l_samples = 4;
  cfg.win_h = 2;
  cfg.win_w = 2;
  BlockParams<double> bp = random_block(rng, 16);
  const Md x = random_mat(rng, 16, 16);

  I2RConfig both_off = cfg;
  both_off.no_intra = true;
  both_off.no_inter = true;
  Md out;
  i2r_msa<double>(x, bp, both_off, out, nullptr);
  const Md v = (x * bp.v.W).rowwise() + bp.v.b.transpose();
  const Md expected = (v * bp.o.W).rowwise() + bp.o.b.transpose();
  CHECK((out - expected).cwiseAbs().maxCoeff() < 1e-12);
}
