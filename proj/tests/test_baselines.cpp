#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "episeg/baselines.hpp"
#include "episeg/dataset.hpp"
#include "episeg/model.hpp"
#include "episeg/rng.hpp"
#include "episeg/training.hpp"

using episeg::BaseFeatureNet;
using episeg::BaseTrainConfig;
using episeg::BinaryMask;
using episeg::Episode;
using episeg::LabelRaster;
using episeg::LogregFit;
using episeg::Rng;
using episeg::SegDataset;
using episeg::SiameseConfig;
using episeg::SiameseMatcher;
using episeg::SynthConfig;
using episeg::Tape;
using episeg::Tensor;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

SegDataset tiny_corpus(std::uint64_t seed) {
  SynthConfig cfg;
  cfg.num_classes = 5;
  cfg.num_images = 40;
  cfg.height = 24;
  cfg.width = 24;
  cfg.seed = seed;
  return episeg::generate_synthetic(cfg);
}

const std::vector<int> kTrainClasses = {1, 2, 3};
const std::vector<int> kTestClasses = {4, 5};

// Training view with the test classes wiped to background, the state every
// encoder here is trained in.
SegDataset training_view(const SegDataset& ds) {
  episeg::FoldSpec fold;
  fold.train_classes = kTrainClasses;
  fold.test_classes = kTestClasses;
  return episeg::remap_to_training_view(ds, fold);
}

// A quick net + one held-out-class episode for predictor tests. Training is
// short: the predictors only need *some* fixed feature extractor.
struct Fixture {
  BaseFeatureNet net;
  SegDataset ds;

  static Fixture make(std::uint64_t seed) {
    SegDataset ds = tiny_corpus(seed);
    BaseTrainConfig cfg;
    cfg.widths = {6, 6, 8};
    cfg.iterations = 60;
    cfg.seed = seed;
    BaseFeatureNet net = episeg::train_base_classifier(training_view(ds), kTrainClasses, cfg);
    return Fixture{std::move(net), std::move(ds)};
  }

  Episode episode(std::uint64_t seed, int k = 1) const {
    Rng rng(seed);
    return episeg::sample_episode(ds, kTestClasses, k, rng);
  }
};

// Support feature pixels flattened the same way the predictors pool them:
// image by image, row-major pixels, one row of `dim` channels each.
struct FlatSupport {
  std::int64_t dim = 0;
  std::vector<std::vector<double>> rows;
  std::vector<std::uint8_t> labels;
};

template <typename NetLike>
FlatSupport flatten_support(const NetLike& net, const Episode& ep) {
  FlatSupport out;
  Tape tape(false);
  for (std::size_t s = 0; s < ep.support_images.size(); ++s) {
    const Tensor f = net.features(tape, episeg::to_input_tensor(ep.support_images[s]));
    const std::int64_t d = f.extent(0), h = f.extent(1), w = f.extent(2), hw = h * w;
    out.dim = d;
    const BinaryMask lab = episeg::downsample_mask(ep.support_masks[s], h, w);
    for (std::int64_t p = 0; p < hw; ++p) {
      std::vector<double> row(static_cast<std::size_t>(d));
      for (std::int64_t c = 0; c < d; ++c) row[c] = f.data()[c * hw + p];
      out.rows.push_back(std::move(row));
      out.labels.push_back(lab.fg[p]);
    }
  }
  return out;
}

// Label map -> query-sized mask, duplicating the upsample+threshold tail so
// the brute-force oracles cross the resolution gap the same way.
BinaryMask lift_label_map(std::vector<double> fg, std::int64_t h, std::int64_t w,
                          std::int64_t out_h, std::int64_t out_w) {
  Tape tape(false);
  const Tensor probs = Tensor::from_data({1, h, w}, std::move(fg));
  return episeg::threshold_probs(episeg::bilinear_upsample(tape, probs, out_h, out_w));
}

double sigmoid_of(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

// ---------------------------------------------------------------------------
// label-grid reduction

TEST_CASE("labels: hand-checked majority vote with ties to the smallest id") {
  //  1 1 2 2     2x2 blocks: TL = {1,1,3,0} -> 1 wins, TR = {2,2,0,0} tie -> 0
  //  3 0 0 0
  //  0 5 5 5     BL = {0,5,0,0} -> 0,       BR = {5,5,4,4} tie -> 4
  //  0 0 4 4
  const LabelRaster r{4, 4, {1, 1, 2, 2, 3, 0, 0, 0, 0, 5, 5, 5, 0, 0, 4, 4}};
  CHECK(episeg::downsample_labels(r, 2, 2) == std::vector<int>{1, 0, 0, 4});
  // Identity size is a copy.
  CHECK(episeg::downsample_labels(r, 4, 4) ==
        std::vector<int>(r.class_ids.begin(), r.class_ids.end()));
  CHECK_THROWS_AS(episeg::downsample_labels(r, 5, 4), std::runtime_error);
  CHECK_THROWS_AS(episeg::downsample_labels(r, 0, 2), std::runtime_error);
}

TEST_CASE("labels: random rasters agree with a per-cell recount") {
  Rng rng(2027);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t H = 3 + static_cast<std::int64_t>(rng.below(10));
    const std::int64_t W = 3 + static_cast<std::int64_t>(rng.below(10));
    LabelRaster r;
    r.height = H;
    r.width = W;
    for (std::int64_t i = 0; i < H * W; ++i)
      r.class_ids.push_back(static_cast<std::uint8_t>(rng.below(6)));
    const std::int64_t h = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(H)));
    const std::int64_t w = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(W)));

    const std::vector<int> got = episeg::downsample_labels(r, h, w);
    REQUIRE(got.size() == static_cast<std::size_t>(h * w));
    // Independent recount through the inverse map: pixel R lands in the cell
    // i with floor(i*H/h) <= R < floor((i+1)*H/h), i.e. i = ((R+1)*h - 1)/H.
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) {
        std::map<int, int> votes;
        for (std::int64_t R = 0; R < H; ++R)
          for (std::int64_t C = 0; C < W; ++C)
            if (((R + 1) * h - 1) / H == i && ((C + 1) * w - 1) / W == j)
              ++votes[r.class_ids[R * W + C]];
        int best_id = -1, best_n = -1;
        for (const auto& [id, n] : votes)
          if (n > best_n) {
            best_n = n;
            best_id = id;
          }
        CHECK(got[i * w + j] == best_id);
      }
  }
}

// ---------------------------------------------------------------------------
// supervised base encoder

TEST_CASE("basenet: head width, remap enforcement, and deterministic training") {
  const SegDataset raw = tiny_corpus(11);
  const SegDataset ds = training_view(raw);
  BaseTrainConfig cfg;
  cfg.widths = {6, 6, 8};
  cfg.iterations = 40;
  cfg.seed = 5;

  const BaseFeatureNet net = episeg::train_base_classifier(ds, kTrainClasses, cfg);
  CHECK(net.num_labels() == 4);  // background + three classes
  CHECK(net.feature_dim() == 8);

  Tape tape(false);
  const Tensor f = net.features(tape, episeg::to_input_tensor(ds.images[0]));
  CHECK(f.extent(0) == 8);
  CHECK(f.extent(1) == 6);  // 24 / 4
  const Tensor logits = net.label_logits(tape, f);
  CHECK(logits.extent(0) == 4);

  // Same config, same seed -> byte-identical parameters.
  const BaseFeatureNet again = episeg::train_base_classifier(ds, kTrainClasses, cfg);
  const fs::path dir = temp_dir("episeg_basenet_det");
  episeg::save_checkpoint(net.to_checkpoint(cfg.seed), (dir / "a.ck").string());
  episeg::save_checkpoint(again.to_checkpoint(cfg.seed), (dir / "b.ck").string());
  CHECK(slurp(dir / "a.ck") == slurp(dir / "b.ck"));

  // A label outside the training classes must be rejected, not silently
  // folded into background — only the remapped view may be trained on.
  CHECK_THROWS_WITH_AS(episeg::train_base_classifier(raw, kTrainClasses, cfg),
                       doctest::Contains("not a training class"), std::runtime_error);
  CHECK_THROWS_AS(episeg::train_base_classifier(ds, {}, cfg), std::invalid_argument);
  CHECK_THROWS_AS(episeg::train_base_classifier(ds, {1, 1, 2}, cfg), std::invalid_argument);
}

TEST_CASE("basenet: training beats the majority-class rate on seen images") {
  const SegDataset ds = training_view(tiny_corpus(19));
  BaseTrainConfig cfg;
  cfg.widths = {8, 12, 16};
  cfg.iterations = 400;
  cfg.seed = 2;
  const BaseFeatureNet net = episeg::train_base_classifier(ds, kTrainClasses, cfg);

  const std::map<int, int> channel = {{0, 0}, {1, 1}, {2, 2}, {3, 3}};
  std::int64_t correct = 0, total = 0;
  std::map<int, std::int64_t> class_count;
  Tape tape(false);
  for (std::size_t i = 0; i < 50 && i < ds.images.size(); ++i) {
    const Tensor f = net.features(tape, episeg::to_input_tensor(ds.images[i]));
    const Tensor logits = net.label_logits(tape, f);
    const std::int64_t h = logits.extent(1), w = logits.extent(2), hw = h * w;
    const std::vector<int> cells = episeg::downsample_labels(ds.labels[i], h, w);
    for (std::int64_t p = 0; p < hw; ++p) {
      int arg = 0;
      double best = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < 4; ++c)
        if (logits.data()[c * hw + p] > best) {
          best = logits.data()[c * hw + p];
          arg = c;
        }
      correct += arg == channel.at(cells[p]) ? 1 : 0;
      ++total;
      ++class_count[channel.at(cells[p])];
    }
  }
  std::int64_t majority = 0;
  for (const auto& [c, n] : class_count) majority = std::max(majority, n);
  REQUIRE(total > 0);
  // Beating always-predict-the-majority-channel means the head actually
  // learned pixel classification, not just a prior.
  CHECK(static_cast<double>(correct) / static_cast<double>(total) >
        static_cast<double>(majority) / static_cast<double>(total));
}

TEST_CASE("basenet: checkpoint round trip and kind check") {
  const SegDataset ds = training_view(tiny_corpus(23));
  BaseTrainConfig cfg;
  cfg.widths = {4, 4, 6};
  cfg.iterations = 10;
  cfg.seed = 9;
  const BaseFeatureNet net = episeg::train_base_classifier(ds, kTrainClasses, cfg);

  const fs::path dir = temp_dir("episeg_basenet_ck");
  episeg::save_checkpoint(net.to_checkpoint(cfg.seed), (dir / "net.ck").string());
  const BaseFeatureNet back =
      BaseFeatureNet::from_checkpoint(episeg::load_checkpoint((dir / "net.ck").string()));

  Tape tape(false);
  const Tensor a = net.features(tape, episeg::to_input_tensor(ds.images[3]));
  const Tensor b = back.features(tape, episeg::to_input_tensor(ds.images[3]));
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);

  CHECK_THROWS_AS(SiameseMatcher::from_checkpoint(net.to_checkpoint(0)), std::runtime_error);
  CHECK_THROWS_AS(net.tail_params(0), std::invalid_argument);
  CHECK_THROWS_AS(net.tail_params(4), std::invalid_argument);
  CHECK(net.tail_params(2).size() == 4);  // two kernels + two biases
}

// ---------------------------------------------------------------------------
// nearest neighbor

TEST_CASE("nn1: matches a brute-force scan exactly, including k-shot pooling") {
  const Fixture fx = Fixture::make(31);
  for (std::uint64_t seed : {100, 101, 102}) {
    for (int k : {1, 3}) {
      const Episode ep = fx.episode(seed, k);
      const BinaryMask got = episeg::nn1_predict(fx.net, ep);

      // Oracle: scan pooled support rows back to front with <= so the lowest
      // index still wins ties, through an independent code path.
      const FlatSupport sup = flatten_support(fx.net, ep);
      Tape tape(false);
      const Tensor qf = fx.net.features(tape, episeg::to_input_tensor(ep.query_image));
      const std::int64_t d = qf.extent(0), h = qf.extent(1), w = qf.extent(2), hw = h * w;
      std::vector<double> fg(static_cast<std::size_t>(hw));
      for (std::int64_t p = 0; p < hw; ++p) {
        double best = std::numeric_limits<double>::infinity();
        std::uint8_t label = 0;
        for (std::int64_t j = static_cast<std::int64_t>(sup.rows.size()) - 1; j >= 0; --j) {
          double d2 = 0.0;
          for (std::int64_t c = 0; c < d; ++c) {
            const double diff = qf.data()[c * hw + p] - sup.rows[j][c];
            d2 += diff * diff;
          }
          if (d2 <= best) {
            best = d2;
            label = sup.labels[j];
          }
        }
        fg[static_cast<std::size_t>(p)] = label;
      }
      const BinaryMask want =
          lift_label_map(std::move(fg), h, w, ep.query_image.height, ep.query_image.width);
      REQUIRE(got.height == want.height);
      REQUIRE(got.width == want.width);
      CHECK(got.fg == want.fg);
    }
  }
}

TEST_CASE("nn1: tie between equal support pixels keeps the lowest pooled index") {
  // Duplicate the single support image: rows 0..hw-1 and hw..2hw-1 hold
  // identical features, the second copy labeled all-background. The winner
  // must stay the first copy, so the prediction must equal the 1-shot one.
  const Fixture fx = Fixture::make(37);
  Episode ep = fx.episode(200, 1);
  const BinaryMask one_shot = episeg::nn1_predict(fx.net, ep);

  Episode doubled = ep;
  doubled.support_images.push_back(ep.support_images[0]);
  BinaryMask none = ep.support_masks[0];
  std::fill(none.fg.begin(), none.fg.end(), std::uint8_t{0});
  doubled.support_masks.push_back(none);

  const BinaryMask got = episeg::nn1_predict(fx.net, doubled);
  CHECK(got.fg == one_shot.fg);
}

// ---------------------------------------------------------------------------
// logistic regression

namespace {

// Independent convex optimizer: plain gradient descent with backtracking on
// the same objective. Slow but needs no Hessian, so it cannot share a bug
// with the Newton path.
LogregFit gd_logistic(const std::vector<double>& x, std::int64_t n, std::int64_t d,
                      const std::vector<std::uint8_t>& y, double reg) {
  std::vector<double> w(static_cast<std::size_t>(d), 0.0);
  double b = 0.0;
  auto objective = [&](const std::vector<double>& wv, double bv) {
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      double z = bv;
      for (std::int64_t c = 0; c < d; ++c) z += wv[c] * x[i * d + c];
      loss += (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z))) - (y[i] ? z : 0.0);
    }
    loss /= static_cast<double>(n);
    for (double v : wv) loss += 0.5 * reg * v * v;
    return loss;
  };
  bool stalled = false;
  for (int iter = 0; iter < 200000 && !stalled; ++iter) {
    std::vector<double> g(static_cast<std::size_t>(d), 0.0);
    double gb = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      double z = b;
      for (std::int64_t c = 0; c < d; ++c) z += w[c] * x[i * d + c];
      const double r = 1.0 / (1.0 + std::exp(-z)) - (y[i] ? 1.0 : 0.0);
      for (std::int64_t c = 0; c < d; ++c) g[c] += r * x[i * d + c];
      gb += r;
    }
    double gmax = 0.0;
    for (std::int64_t c = 0; c < d; ++c) {
      g[c] = g[c] / static_cast<double>(n) + reg * w[c];
      gmax = std::max(gmax, std::abs(g[c]));
    }
    gb /= static_cast<double>(n);
    gmax = std::max(gmax, std::abs(gb));
    if (gmax < 1e-10) break;

    // Accept within a few ulps, not strict decrease: close to the optimum
    // the objective is flat at double resolution while the gradient (the
    // stopping quantity) still shrinks with every step.
    const double before = objective(w, b);
    const double slack = 1e-14 * (1.0 + std::abs(before));
    double t = 1.0;
    while (true) {
      std::vector<double> w2(w);
      for (std::int64_t c = 0; c < d; ++c) w2[c] -= t * g[c];
      const double b2 = b - t * gb;
      if (objective(w2, b2) <= before + slack) {
        w = std::move(w2);
        b = b2;
        break;
      }
      t *= 0.5;
      if (t < 1e-20) {
        stalled = true;
        break;
      }
    }
  }
  return {std::move(w), b, 0};
}

}  // namespace

TEST_CASE("logreg: Newton solution matches a gradient-descent oracle") {
  Rng rng(555);
  for (int trial = 0; trial < 5; ++trial) {
    const std::int64_t n = 30 + static_cast<std::int64_t>(rng.below(30));
    const std::int64_t d = 2 + static_cast<std::int64_t>(rng.below(4));
    std::vector<double> x;
    std::vector<std::uint8_t> y;
    for (std::int64_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::int64_t c = 0; c < d; ++c) {
        const double v = rng.normal();
        x.push_back(v);
        sum += v;
      }
      // Noisy labels keep the problem non-separable so the optimum is finite.
      y.push_back(sum + 0.8 * rng.normal() > 0.0 ? 1 : 0);
    }
    if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0)
      continue;

    const LogregFit newton = episeg::fit_logistic(x, n, d, y, 1e-3, 200);
    const LogregFit gd = gd_logistic(x, n, d, y, 1e-3);
    for (std::int64_t c = 0; c < d; ++c) CHECK(std::abs(newton.w[c] - gd.w[c]) < 1e-6);
    CHECK(std::abs(newton.b - gd.b) < 1e-6);
  }
}

TEST_CASE("logreg: heavy regularization crushes the weights toward zero") {
  Rng rng(77);
  std::vector<double> x;
  std::vector<std::uint8_t> y;
  for (int i = 0; i < 40; ++i) {
    const double v = rng.normal();
    x.push_back(v);
    x.push_back(rng.normal());
    y.push_back(v > 0 ? 1 : 0);
  }
  const LogregFit light = episeg::fit_logistic(x, 40, 2, y, 1e-4, 200);
  const LogregFit heavy = episeg::fit_logistic(x, 40, 2, y, 1e4, 200);
  CHECK(std::abs(heavy.w[0]) < 1e-3);
  CHECK(std::abs(heavy.w[1]) < 1e-3);
  CHECK(std::abs(heavy.w[0]) < std::abs(light.w[0]));
  // The bias is unregularized, so it still matches the class prior.
  const double prior =
      static_cast<double>(std::count(y.begin(), y.end(), 1)) / static_cast<double>(y.size());
  CHECK(std::abs(sigmoid_of(heavy.b) - prior) < 1e-3);
}

TEST_CASE("logreg: linearly separable support is classified perfectly") {
  // Two clusters far apart; even the regularized boundary splits them.
  std::vector<double> x;
  std::vector<std::uint8_t> y;
  for (int i = 0; i < 10; ++i) {
    x.push_back(5.0 + 0.1 * i);
    x.push_back(1.0);
    y.push_back(1);
    x.push_back(-5.0 - 0.1 * i);
    x.push_back(-1.0);
    y.push_back(0);
  }
  const LogregFit fit = episeg::fit_logistic(x, 20, 2, y, 1e-3, 500);
  for (int i = 0; i < 20; ++i) {
    const double z = fit.b + fit.w[0] * x[2 * i] + fit.w[1] * x[2 * i + 1];
    CHECK((z > 0.0) == (y[i] == 1));
  }
  CHECK_THROWS_AS(episeg::fit_logistic(x, 20, 3, y, 1e-3, 100), std::invalid_argument);
  CHECK_THROWS_AS(episeg::fit_logistic(x, 20, 2, y, -1.0, 100), std::invalid_argument);
}

TEST_CASE("logreg: one-class support degenerates to a constant mask") {
  const Fixture fx = Fixture::make(41);
  Episode ep = fx.episode(300, 1);

  std::fill(ep.support_masks[0].fg.begin(), ep.support_masks[0].fg.end(), std::uint8_t{1});
  const BinaryMask all_fg = episeg::logreg_predict(fx.net, ep);
  CHECK(all_fg.count_fg() == static_cast<std::int64_t>(all_fg.fg.size()));

  std::fill(ep.support_masks[0].fg.begin(), ep.support_masks[0].fg.end(), std::uint8_t{0});
  const BinaryMask all_bg = episeg::logreg_predict(fx.net, ep);
  CHECK(all_bg.count_fg() == 0);
}

TEST_CASE("logreg: episode prediction matches refitting by hand") {
  const Fixture fx = Fixture::make(43);
  const Episode ep = fx.episode(400, 2);
  const BinaryMask got = episeg::logreg_predict(fx.net, ep);

  const FlatSupport sup = flatten_support(fx.net, ep);
  std::vector<double> flat;
  for (const auto& row : sup.rows) flat.insert(flat.end(), row.begin(), row.end());
  const LogregFit fit = episeg::fit_logistic(
      flat, static_cast<std::int64_t>(sup.rows.size()), sup.dim, sup.labels, 1e-3, 500);

  Tape tape(false);
  const Tensor qf = fx.net.features(tape, episeg::to_input_tensor(ep.query_image));
  const std::int64_t d = qf.extent(0), h = qf.extent(1), w = qf.extent(2), hw = h * w;
  std::vector<double> probs(static_cast<std::size_t>(hw));
  for (std::int64_t p = 0; p < hw; ++p) {
    double z = fit.b;
    for (std::int64_t c = 0; c < d; ++c) z += fit.w[c] * qf.data()[c * hw + p];
    probs[static_cast<std::size_t>(p)] = sigmoid_of(z);
  }
  const BinaryMask want =
      lift_label_map(std::move(probs), h, w, ep.query_image.height, ep.query_image.width);
  CHECK(got.fg == want.fg);
}

// ---------------------------------------------------------------------------
// fine-tuning

TEST_CASE("finetune: zero steps yields the 0.5 prior, i.e. an all-foreground mask") {
  const Fixture fx = Fixture::make(47);
  const Episode ep = fx.episode(500, 1);
  const BinaryMask got = episeg::finetune_predict(fx.net, ep, 0, 0.1);
  // A zero head scores every pixel exactly 0.5 and the threshold is >= 0.5.
  CHECK(got.count_fg() == static_cast<std::int64_t>(got.fg.size()));
}

TEST_CASE("finetune: support loss never increases at a small learning rate") {
  const Fixture fx = Fixture::make(53);
  const Episode ep = fx.episode(600, 1);
  std::vector<double> trace;
  (void)episeg::finetune_predict(fx.net, ep, 25, 0.05, &trace);
  REQUIRE(trace.size() == 25);
  CHECK(std::abs(trace.front() - std::log(2.0)) < 1e-9);  // bce at p = 0.5
  for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1] + 1e-12);
  CHECK(trace.back() < trace.front());
}

TEST_CASE("finetune: the shared net is left untouched") {
  const Fixture fx = Fixture::make(59);
  const Episode ep = fx.episode(700, 2);
  const fs::path dir = temp_dir("episeg_finetune_purity");
  episeg::save_checkpoint(fx.net.to_checkpoint(0), (dir / "before.ck").string());
  (void)episeg::finetune_predict(fx.net, ep, 8, 0.1);
  episeg::save_checkpoint(fx.net.to_checkpoint(0), (dir / "after.ck").string());
  CHECK(slurp(dir / "before.ck") == slurp(dir / "after.ck"));

  CHECK_THROWS_AS(episeg::finetune_predict(fx.net, ep, -1, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(episeg::finetune_predict(fx.net, ep, 5, 0.0), std::invalid_argument);
}

TEST_CASE("finetune: separable supports are fit almost perfectly") {
  // After enough steps on an easy episode the support pixels themselves
  // should be classified well; check the training loss drops hard.
  const Fixture fx = Fixture::make(61);
  const Episode ep = fx.episode(800, 1);
  std::vector<double> trace;
  (void)episeg::finetune_predict(fx.net, ep, 120, 0.5, &trace);
  CHECK(trace.back() < 0.45);  // well under log(2) ~ 0.693
}

// ---------------------------------------------------------------------------
// siamese matcher

TEST_CASE("siamese: prediction matches a brute-force similarity scan") {
  const SegDataset ds = tiny_corpus(67);
  SiameseConfig cfg;
  cfg.widths = {6, 6, 8};
  cfg.iterations = 40;
  cfg.seed = 13;
  const SiameseMatcher m = episeg::siamese_train(ds, kTrainClasses, cfg);

  for (std::uint64_t seed : {900, 901}) {
    for (int k : {1, 2}) {
      Rng rng(seed);
      const Episode ep = episeg::sample_episode(ds, kTestClasses, k, rng);
      const BinaryMask got = m.predict(ep);

      const FlatSupport sup = flatten_support(m, ep);
      Tape tape(false);
      const Tensor qf = m.features(tape, episeg::to_input_tensor(ep.query_image));
      const std::int64_t d = qf.extent(0), h = qf.extent(1), w = qf.extent(2), hw = h * w;
      std::vector<double> fg(static_cast<std::size_t>(hw));
      for (std::int64_t p = 0; p < hw; ++p) {
        // Back-to-front with >= keeps the lowest index, and going through
        // the full sigmoid must rank pairs the same way the logit does.
        double best = -1.0;
        std::uint8_t label = 0;
        for (std::int64_t j = static_cast<std::int64_t>(sup.rows.size()) - 1; j >= 0; --j) {
          double z = m.beta().data()[0];
          for (std::int64_t c = 0; c < d; ++c)
            z += m.alpha().data()[c] * std::abs(qf.data()[c * hw + p] - sup.rows[j][c]);
          const double sim = sigmoid_of(z);
          if (sim >= best) {
            best = sim;
            label = sup.labels[j];
          }
        }
        fg[static_cast<std::size_t>(p)] = label;
      }
      const BinaryMask want =
          lift_label_map(std::move(fg), h, w, ep.query_image.height, ep.query_image.width);
      REQUIRE(got.height == want.height);
      CHECK(got.fg == want.fg);
    }
  }
}

TEST_CASE("siamese: fresh matcher ranks identical pixels most similar") {
  // Untrained alpha is -1/D < 0, so distance zero maximizes the similarity:
  // using the query itself as support must reproduce its own downsampled
  // mask (every pixel's nearest match is itself at distance 0).
  const SegDataset ds = tiny_corpus(71);
  const SiameseMatcher m({4, 4, 6}, 3);

  Rng rng(17);
  Episode ep = episeg::sample_episode(ds, kTestClasses, 1, rng);
  ep.support_images[0] = ep.query_image;
  ep.support_masks[0] = ep.query_mask;

  const BinaryMask got = m.predict(ep);
  Tape tape(false);
  const Tensor qf = m.features(tape, episeg::to_input_tensor(ep.query_image));
  const BinaryMask cells = episeg::downsample_mask(ep.query_mask, qf.extent(1), qf.extent(2));
  std::vector<double> fg(cells.fg.begin(), cells.fg.end());
  const BinaryMask want = lift_label_map(std::move(fg), cells.height, cells.width,
                                         ep.query_image.height, ep.query_image.width);
  CHECK(got.fg == want.fg);
}

TEST_CASE("siamese: training is deterministic and improves verification") {
  const SegDataset ds = tiny_corpus(73);
  SiameseConfig cfg;
  cfg.widths = {6, 6, 8};
  cfg.iterations = 150;
  cfg.seed = 21;
  const SiameseMatcher m = episeg::siamese_train(ds, kTrainClasses, cfg);
  const SiameseMatcher again = episeg::siamese_train(ds, kTrainClasses, cfg);

  const fs::path dir = temp_dir("episeg_siamese_det");
  episeg::save_checkpoint(m.to_checkpoint(cfg.seed), (dir / "a.ck").string());
  episeg::save_checkpoint(again.to_checkpoint(cfg.seed), (dir / "b.ck").string());
  CHECK(slurp(dir / "a.ck") == slurp(dir / "b.ck"));

  // Verification accuracy on fresh pairs: predict same/different via the
  // learned similarity at threshold 0.5 and insist on better than chance.
  Rng rng(99);
  std::int64_t correct = 0, total = 0;
  Tape tape(false);
  for (int trial = 0; trial < 20; ++trial) {
    const Episode pair = episeg::sample_episode(ds, kTrainClasses, 1, rng);
    const Tensor fa = m.features(tape, episeg::to_input_tensor(pair.support_images[0]));
    const Tensor fb = m.features(tape, episeg::to_input_tensor(pair.query_image));
    const std::int64_t d = fa.extent(0);
    const std::int64_t hwa = fa.extent(1) * fa.extent(2);
    const std::int64_t hwb = fb.extent(1) * fb.extent(2);
    const BinaryMask la = episeg::downsample_mask(pair.support_masks[0], fa.extent(1), fa.extent(2));
    const BinaryMask lb = episeg::downsample_mask(pair.query_mask, fb.extent(1), fb.extent(2));
    for (std::int64_t p = 0; p < hwa; p += 7)
      for (std::int64_t q = 0; q < hwb; q += 5) {
        double z = m.beta().data()[0];
        for (std::int64_t c = 0; c < d; ++c)
          z += m.alpha().data()[c] * std::abs(fa.data()[c * hwa + p] - fb.data()[c * hwb + q]);
        const bool same = la.fg[p] == lb.fg[q];
        correct += (sigmoid_of(z) >= 0.5) == same ? 1 : 0;
        ++total;
      }
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(total) > 0.5);

  CHECK_THROWS_AS(episeg::siamese_train(ds, {}, cfg), std::invalid_argument);
  SiameseConfig bad = cfg;
  bad.sample_fraction = 0.0;
  CHECK_THROWS_AS(episeg::siamese_train(ds, kTrainClasses, bad), std::invalid_argument);
}

TEST_CASE("siamese: checkpoint round trip") {
  const SegDataset ds = tiny_corpus(79);
  SiameseConfig cfg;
  cfg.widths = {4, 6};
  cfg.iterations = 15;
  cfg.seed = 8;
  const SiameseMatcher m = episeg::siamese_train(ds, kTrainClasses, cfg);

  const fs::path dir = temp_dir("episeg_siamese_ck");
  episeg::save_checkpoint(m.to_checkpoint(cfg.seed), (dir / "m.ck").string());
  const SiameseMatcher back =
      SiameseMatcher::from_checkpoint(episeg::load_checkpoint((dir / "m.ck").string()));

  Rng rng(5);
  const Episode ep = episeg::sample_episode(ds, kTestClasses, 1, rng);
  const BinaryMask a = m.predict(ep);
  const BinaryMask b = back.predict(ep);
  CHECK(a.fg == b.fg);

  CHECK_THROWS_AS(BaseFeatureNet::from_checkpoint(m.to_checkpoint(0)), std::runtime_error);
}
