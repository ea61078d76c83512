#include <bit>
#include <set>

#include "doctest.h"
#include "iscom/codec.hpp"
#include "iscom/octree.hpp"
#include "oracles.hpp"

using namespace iscom;
using namespace iscom::codec;

namespace {

CodecArch small_arch(std::size_t latent = 16) {
  CodecArch a;
  a.points = 32;
  a.latent = latent;
  a.enc_hidden1 = 16;
  a.enc_hidden2 = 32;
  a.dec_hidden = 32;
  return a;
}

std::vector<Block> small_dataset(std::size_t count, std::uint64_t seed = 5) {
  return make_toy_dataset(count, 32, seed);
}

std::size_t count_le(const std::vector<double>& w, double th) {
  return static_cast<std::size_t>(
      std::count_if(w.begin(), w.end(), [th](double x) { return std::abs(x) <= th; }));
}

}  // namespace

TEST_CASE("encode: latent size, zero encoder, permutation invariance") {
  for (std::size_t d : {16, 64, 256}) {
    const auto m = CodecModel::create(CodecArch::for_latent(d), 1);
    const auto blk = make_toy_dataset(1, 128, 3)[0];
    CHECK(m.encode(blk).size() == d);
  }
  auto m = CodecModel::create(small_arch(), 2);
  for (auto& l : m.encoder.layers) {
    std::fill(l.weights.data.begin(), l.weights.data.end(), 0.0);
    std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0);
  }
  for (double z : m.encode(small_dataset(1)[0])) CHECK(z == 0.0);

  const auto m2 = CodecModel::create(small_arch(), 3);
  Block blk = small_dataset(1)[0];
  const auto z1 = m2.encode(blk);
  Rng rng(4);
  for (std::size_t i = blk.size(); i > 1; --i) std::swap(blk[i - 1], blk[rng.below(i)]);
  CHECK(m2.encode(blk) == z1);
  CHECK_THROWS_AS(m2.encode(Block{}), InvalidArgument);
}

TEST_CASE("encode pads short blocks by repetition") {
  const auto m = CodecModel::create(small_arch(), 6);
  const Block three{{0.1, 0.2, 0.3}, {-0.4, 0.5, 0.0}, {0.9, -0.1, 0.2}};
  CHECK(m.encode(three) == m.encode(pad_block(three, 32)));
  const Block padded = pad_block(three, 7);
  CHECK(padded[6] == three[0]);
}

TEST_CASE("decode: zero latent with zero biases, wrong length") {
  auto m = CodecModel::create(small_arch(), 7);
  for (auto& l : m.decoder.layers) std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0);
  for (const auto& p : m.decode(std::vector<double>(16, 0.0))) CHECK(p == Vec3::Zero());
  CHECK_THROWS_AS(m.decode(std::vector<double>(15, 0.0)), InvalidArgument);
}

TEST_CASE("train: zero epochs, determinism, progress") {
  const auto data = small_dataset(24);
  auto m = CodecModel::create(small_arch(), 8);
  const auto before = serialize(m);
  TrainConfig tc;
  tc.epochs = 0;
  CHECK(train(m, data, tc).loss.empty());
  CHECK(serialize(m) == before);

  tc.epochs = 6;
  tc.batch = 4;
  auto a = CodecModel::create(small_arch(), 8), b = a;
  const auto ca = train(a, data, tc), cb = train(b, data, tc);
  CHECK(ca.loss == cb.loss);
  CHECK(ca.chamfer == cb.chamfer);
  CHECK(serialize(a) == serialize(b));
  CHECK(ca.loss.back() < ca.loss.front());

  // Self-consistency: per-example reconstruction CDs average to mean_chamfer.
  double sum = 0.0, best = 1e9;
  for (const auto& blk : data) {
    const double cd = chamfer_distance(a.reconstruct(blk), blk);
    sum += cd;
    best = std::min(best, cd);
  }
  CHECK(std::abs(sum / data.size() - mean_chamfer(a, data)) <= 1e-12);
  CHECK(best <= mean_chamfer(a, data));
  CHECK_THROWS_AS(train(a, {}, tc), InvalidArgument);
}

TEST_CASE("train: a non-finite weight aborts with the epoch number") {
  auto m = CodecModel::create(small_arch(), 9);
  m.decoder.layers[0].bias.data[0] = std::nan("");
  TrainConfig tc;
  tc.epochs = 2;
  try {
    train(m, small_dataset(4), tc);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("prune_threshold") {
  const std::vector<double> w{0.1, -0.5, 0.3, 0.9};
  CHECK(prune_threshold(w, 0.5) == 0.3);
  const double t0 = prune_threshold(w, 0.0);
  CHECK(t0 < 0.1);
  CHECK(count_le(w, t0) == 0);

  Rng rng(10);
  std::vector<double> r(1000);
  for (auto& x : r) x = rng.normal();
  for (double zeta : {0.1, 0.25, 0.5, 0.75, 0.9}) {
    std::vector<double> mags;
    for (double x : r) mags.push_back(std::abs(x));
    std::sort(mags.begin(), mags.end());
    const std::size_t k = ceil_count(zeta, 1000);
    const double th = prune_threshold(r, zeta);
    CHECK(th == mags[k - 1]);
    CHECK(count_le(r, th) == k);
  }
  CHECK_THROWS_AS(prune_threshold({}, 0.5), InvalidArgument);
  CHECK_THROWS_AS(prune_threshold(w, 1.0), InvalidArgument);
}

TEST_CASE("prune_layer") {
  auto l = nn::Layer::dense(4, 1);
  l.weights.data = {0.1, -0.5, 0.3, 0.9};
  prune_layer(l, 0.0);
  CHECK(l.weights.data == std::vector<double>{0.1, -0.5, 0.3, 0.9});
  prune_layer(l, 0.3);
  CHECK(l.weights.data == std::vector<double>{0, -0.5, 0, 0.9});
  CHECK(l.prune_mask.data == std::vector<double>{0, 1, 0, 1});
  const auto snapshot = l.weights.data;
  prune_layer(l, 0.3);
  CHECK(l.weights.data == snapshot);

  // Ties at the threshold: the lowest flat indices go first.
  auto t = nn::Layer::dense(6, 1);
  t.weights.data = {0.2, -0.2, 0.5, 0.2, 0.1, -0.2};
  prune_layer(t, 0.2, 3);
  CHECK(t.weights.data == std::vector<double>{0, 0, 0.5, 0.2, 0, -0.2});
}

TEST_CASE("prune_model hits the exact count per layer") {
  auto m = CodecModel::create(small_arch(), 11);
  for (double zeta : {0.25, 0.5, 0.75}) {
    auto p = m;
    prune_model(p, zeta);
    for (const auto* net : {&p.encoder, &p.decoder}) {
      for (const auto& l : net->layers) {
        if (!l.has_params()) continue;
        CHECK(l.zero_weight_count() == ceil_count(zeta, l.weights.size()));
      }
    }
  }
}

TEST_CASE("quantize_weights") {
  const auto c = quantize_weights({0.25, 0.25, 0.25}, 8);
  CHECK(c.degenerate());
  CHECK(c.dequantize(3) == std::vector<double>{0.25, 0.25, 0.25});

  const auto b = quantize_weights({0.0, 1.0, 1.0, 0.0}, 8);
  CHECK(b.scale() == 255.0);
  CHECK(b.codes == std::vector<std::uint32_t>{0, 255, 255, 0});
  CHECK(b.dequantize(4) == std::vector<double>{0.0, 1.0, 1.0, 0.0});

  Rng rng(12);
  for (int bits : {8, 16}) {
    std::vector<double> w(1000);
    for (auto& x : w) x = rng.normal(0.1, 0.7);
    const auto q = quantize_weights(w, bits);
    const auto d = q.dequantize(w.size());
    const auto [lo, hi] = std::minmax_element(w.begin(), w.end());
    double worst = 0;
    for (std::size_t i = 0; i < w.size(); ++i) worst = std::max(worst, std::abs(d[i] - w[i]));
    CHECK(worst <= (*hi - *lo) / (2.0 * (std::ldexp(1.0, bits) - 1)) + 1e-9);
    for (auto code : q.codes) CHECK(code < (1u << bits));
  }
  CHECK_THROWS_AS(quantize_weights({1.0}, 12), InvalidArgument);
}

TEST_CASE("quantize_weights keeps pruned zeros exact") {
  Rng rng(13);
  std::vector<double> w(200);
  for (auto& x : w) x = rng.normal();
  for (std::size_t i = 0; i < w.size(); i += 2) w[i] = 0.0;
  const auto q = quantize_weights(w, 8);
  CHECK(q.zero_snap);
  const auto d = q.dequantize(w.size());
  for (std::size_t i = 0; i < w.size(); i += 2) CHECK(d[i] == 0.0);
}

TEST_CASE("quantize_inputs") {
  Rng rng(14);
  std::vector<double> x(400);
  for (auto& v : x) v = rng.uniform();
  const auto plain = quantize_inputs(x, 8, 0.0, 100.0);
  CHECK(plain.q.codes == quantize_weights(x, 8).codes);

  x.push_back(1e6);
  const auto clipped = quantize_inputs(x, 8);
  CHECK(clipped.range_lo >= 0.0);
  CHECK(clipped.range_lo < 0.02);
  CHECK(clipped.range_hi <= 1.0);
  CHECK(clipped.range_hi > 0.98);
  CHECK(clipped.q.codes.back() == 255u);

  double prev = -1;
  for (double hi : {90.0, 95.0, 99.0, 99.5, 100.0}) {
    const auto r = quantize_inputs(x, 8, 0.5, hi);
    CHECK(r.range_hi - r.range_lo >= prev);
    prev = r.range_hi - r.range_lo;
  }
  CHECK(percentile({1, 2, 3, 4}, 50) == 2.5);
  CHECK_THROWS_AS(quantize_inputs({}, 8), InvalidArgument);
}

TEST_CASE("serialize: round trip, layout arithmetic, errors") {
  auto m = CodecModel::create(CodecArch::for_latent(256), 15);
  const auto bytes = serialize(m);
  CHECK(serialize(deserialize(bytes)) == bytes);

  std::size_t expected = 28;  // file header
  for (const auto* net : {&m.encoder, &m.decoder}) {
    for (const auto& l : net->layers) {
      expected += 10;
      if (l.has_params()) expected += 4 * (l.weights.rows() * l.weights.cols() + l.weights.rows());
    }
  }
  CHECK(bytes.size() == expected);
  CHECK(payload_bytes(m) == expected - 28 - 10 * 11);

  auto q8 = m, q16 = m;
  quantize_model(q8, 8);
  quantize_model(q16, 16);
  const auto b8 = serialize(q8), b16 = serialize(q16);
  CHECK(serialize(deserialize(b8)) == b8);
  CHECK(serialize(deserialize(b16)) == b16);
  CHECK(b8.size() < b16.size());
  CHECK(b16.size() < bytes.size());
  const double ratio = static_cast<double>(payload_bytes(q8)) / payload_bytes(m);
  // Zero-initialized biases are constant and carry no codes.
  CHECK(ratio > 0.24);
  CHECK(ratio <= 0.27);

  const auto back = deserialize(b8);
  CHECK(back.dtype == DType::kQ8);
  const auto blk = make_toy_dataset(1, 128, 16)[0];
  CHECK(back.encode(blk) == q8.encode(blk));

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_AS(deserialize(bad), FormatError);
  bad = bytes;
  bad.resize(bad.size() - 5);
  CHECK_THROWS_AS(deserialize(bad), FormatError);
}

TEST_CASE("quantized model output stays close to the f32 model at m=16") {
  const auto data = small_dataset(20);
  auto m = CodecModel::create(small_arch(), 17);
  TrainConfig tc;
  tc.epochs = 3;
  train(m, data, tc);
  auto q = m;
  quantize_model(q, 16);
  double worst = 0.0;
  for (const auto& blk : data) {
    const auto a = m.reconstruct(blk), b = q.reconstruct(blk);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, (a[i] - b[i]).norm());
  }
  CHECK(worst <= 1e-2);
}

TEST_CASE("lightweight_train") {
  const auto data = small_dataset(24);
  auto m = CodecModel::create(small_arch(), 18);
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch = 4;
  train(m, data, tc);

  PruneConfig none;
  none.zeta = 0.0;
  const auto same = lightweight_train(m, data, none, 32);
  CHECK(serialize(same) == serialize(m));

  PruneConfig pc;
  pc.zeta = 0.5;
  pc.rounds = 3;
  pc.finetune_epochs = 1;
  pc.epoch_budget = 20;
  pc.loss_threshold = 1e9;  // always triggered
  pc.train = tc;
  LightweightReport rep;
  const auto light = lightweight_train(m, data, pc, 8, &rep);
  CHECK(rep.rounds_completed == 3);
  CHECK_FALSE(light.prune_incomplete);
  CHECK(light.zeta_applied == 0.5);
  CHECK(light.dtype == DType::kQ8);
  for (const auto* net : {&light.encoder, &light.decoder}) {
    for (const auto& l : net->layers) {
      if (l.has_params()) CHECK(l.zero_weight_count() >= ceil_count(0.5, l.weights.size()));
    }
  }
  CHECK(serialize(light).size() <= 0.30 * serialize(m).size());

  PruneConfig never = pc;
  never.loss_threshold = 0.0;  // never triggered
  never.epoch_budget = 2;
  const auto flagged = lightweight_train(m, data, never, 8);
  CHECK(flagged.prune_incomplete);
  CHECK(flagged.zeta_applied == 0.0);
  CHECK(pc.sparsity_after(1) == doctest::Approx(1 - std::pow(0.5, 1.0 / 3)));
}

TEST_CASE("toy dataset and block normalization") {
  const auto a = make_toy_dataset(10, 64, 99), b = make_toy_dataset(10, 64, 99);
  CHECK(a == b);
  for (const auto& blk : a) {
    CHECK(blk.size() == 64);
    double r = 0;
    for (const auto& p : blk) r = std::max(r, p.norm());
    CHECK(r == doctest::Approx(1.0).epsilon(1e-9));
  }
  Block blk{{1, 2, 3}, {3, 2, 1}, {2, 5, 2}};
  const Block orig = blk;
  const auto f = normalize_block(blk);
  denormalize_block(blk, f);
  for (std::size_t i = 0; i < blk.size(); ++i) CHECK((blk[i] - orig[i]).norm() < 1e-12);
}

TEST_CASE("chunk_points") {
  Rng rng(19);
  const auto pts = oracle::random_points(rng, 300);
  const auto chunks = chunk_points(pts, 128);
  REQUIRE(chunks.size() == 3);
  std::multiset<std::size_t> seen;
  for (const auto& c : chunks) {
    CHECK(c.indices.size() == 128);
    for (std::size_t k = 0; k < c.indices.size() - c.padding; ++k) seen.insert(c.indices[k]);
  }
  CHECK(chunks.back().padding == 84);
  CHECK(seen.size() == 300);
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 300);
  CHECK(chunk_points({}, 128).empty());
}

TEST_CASE("octree: single point, empty cloud, bad depth") {
  PointCloud one;
  one.points = {{1, 2, 3}};
  const auto s = octree::encode(one, 1);
  CHECK(s.size() == octree::kHeaderBytes + 1);
  CHECK(std::popcount(static_cast<unsigned>(s.back())) == 1);
  CHECK(octree::decode(s).size() == 1);

  const auto e = octree::encode(PointCloud{}, 4);
  CHECK(e.size() == octree::kHeaderBytes + 1);
  CHECK(octree::decode(e).empty());
  CHECK_THROWS_AS(octree::encode(one, 0), InvalidArgument);
  CHECK_THROWS_AS(octree::encode(one, 17), InvalidArgument);
}

TEST_CASE("octree: round trip bounds and depth monotonicity") {
  Rng rng(20);
  PointCloud c;
  c.points = oracle::random_points(rng, 2000, -2, 3);
  double prev = 1e9;
  for (int d = 1; d <= 8; ++d) {
    const auto bytes = octree::encode(c, d);
    const PointCloud dec = octree::decode(bytes);
    const double half_diag = octree::leaf_size(octree::cube_bounds(c), d) * std::sqrt(3.0) / 2;
    for (const auto& p : dec.points) CHECK(oracle::nn_dist(p, c.points) <= half_diag + 1e-9);
    for (const auto& p : c.points) CHECK(oracle::nn_dist(p, dec.points) <= half_diag + 1e-9);
    if (d >= 3) {
      const double cd = chamfer_distance(dec, c);
      CHECK(cd <= prev);
      prev = cd;
    }
  }
  CHECK_THROWS_AS(octree::decode({1, 2, 3}), FormatError);
}
