#include "doctest.h"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "episeg/dataset.hpp"
#include "episeg/image_io.hpp"
#include "episeg/rng.hpp"

using episeg::BinaryMask;
using episeg::Episode;
using episeg::EpisodeKey;
using episeg::FoldSpec;
using episeg::GrayBuffer;
using episeg::RgbBuffer;
using episeg::Rng;
using episeg::SegDataset;
using episeg::SynthConfig;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SynthConfig small_config() {
  SynthConfig cfg;
  cfg.num_classes = 5;
  cfg.num_images = 40;
  cfg.height = 24;
  cfg.width = 24;
  cfg.seed = 17;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// netpbm round trips

TEST_CASE("image_io: ppm and pgm round trips are exact") {
  const fs::path dir = temp_dir("episeg_io");
  Rng rng(3);

  RgbBuffer rgb;
  rgb.height = 13;
  rgb.width = 7;
  rgb.planar.resize(3 * 13 * 7);
  for (auto& v : rgb.planar) v = static_cast<std::uint8_t>(rng.below(256));
  episeg::write_ppm((dir / "a.ppm").string(), rgb);
  const RgbBuffer rgb2 = episeg::read_ppm((dir / "a.ppm").string());
  CHECK(rgb2.height == rgb.height);
  CHECK(rgb2.width == rgb.width);
  CHECK(rgb2.planar == rgb.planar);

  GrayBuffer gray;
  gray.height = 9;
  gray.width = 11;
  gray.values.resize(9 * 11);
  for (auto& v : gray.values) v = static_cast<std::uint8_t>(rng.below(256));
  episeg::write_pgm((dir / "b.pgm").string(), gray);
  const GrayBuffer gray2 = episeg::read_pgm((dir / "b.pgm").string());
  CHECK(gray2.values == gray.values);

  fs::remove_all(dir);
}

TEST_CASE("image_io: headers with comments parse, malformed files fail") {
  const fs::path dir = temp_dir("episeg_io_hdr");

  {
    std::ofstream out(dir / "c.pgm", std::ios::binary);
    out << "P5\n# a comment\n2 2\n# more\n255\n";
    const char pixels[4] = {1, 2, 3, 4};
    out.write(pixels, 4);
  }
  const GrayBuffer g = episeg::read_pgm((dir / "c.pgm").string());
  CHECK(g.width == 2);
  CHECK(g.values[3] == 4);

  CHECK_THROWS_AS(episeg::read_pgm((dir / "missing.pgm").string()), std::runtime_error);

  {
    std::ofstream out(dir / "bad.pgm", std::ios::binary);
    out << "P6\n2 2\n255\n";  // wrong magic for pgm
  }
  CHECK_THROWS_AS(episeg::read_pgm((dir / "bad.pgm").string()), std::runtime_error);

  {
    std::ofstream out(dir / "short.pgm", std::ios::binary);
    out << "P5\n4 4\n255\n";
    out.write("ab", 2);
  }
  CHECK_THROWS_WITH_AS(episeg::read_pgm((dir / "short.pgm").string()),
                       doctest::Contains("truncated"), std::runtime_error);

  {
    std::ofstream out(dir / "deep.pgm", std::ios::binary);
    out << "P5\n1 1\n65535\n";
    out.write("ab", 2);
  }
  CHECK_THROWS_WITH_AS(episeg::read_pgm((dir / "deep.pgm").string()),
                       doctest::Contains("maxval"), std::runtime_error);

  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// folds

TEST_CASE("folds: contiguous class blocks are held out") {
  SUBCASE("20 classes, 5 per fold") {
    const FoldSpec f0 = episeg::build_folds(20, 5, 0);
    CHECK(f0.test_classes == std::vector<int>{1, 2, 3, 4, 5});
    CHECK(f0.train_classes.size() == 15);
    CHECK(f0.train_classes.front() == 6);
    CHECK(f0.train_classes.back() == 20);

    const FoldSpec f3 = episeg::build_folds(20, 5, 3);
    CHECK(f3.test_classes == std::vector<int>{16, 17, 18, 19, 20});
    CHECK(std::find(f3.train_classes.begin(), f3.train_classes.end(), 16) ==
          f3.train_classes.end());
  }
  SUBCASE("10 classes, 2 per fold") {
    const FoldSpec f4 = episeg::build_folds(10, 2, 4);
    CHECK(f4.test_classes == std::vector<int>{9, 10});
    CHECK(f4.train_classes == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8});
  }
  SUBCASE("every class lands in exactly one test fold") {
    std::set<int> seen;
    for (int f = 0; f < 4; ++f)
      for (int c : episeg::build_folds(20, 5, f).test_classes) {
        CHECK(seen.insert(c).second);
      }
    CHECK(seen.size() == 20);
  }
  SUBCASE("invalid arguments") {
    CHECK_THROWS_AS(episeg::build_folds(10, 3, 0), std::invalid_argument);
    CHECK_THROWS_AS(episeg::build_folds(10, 2, 5), std::invalid_argument);
    CHECK_THROWS_AS(episeg::build_folds(10, 2, -1), std::invalid_argument);
  }
}

// ---------------------------------------------------------------------------
// synthetic corpus

TEST_CASE("synthetic: generation is deterministic and satisfies coverage bounds") {
  const SynthConfig cfg = small_config();
  const SegDataset a = episeg::generate_synthetic(cfg);
  const SegDataset b = episeg::generate_synthetic(cfg);

  REQUIRE(a.num_images() == cfg.num_images);
  REQUIRE(a.num_classes() == cfg.num_classes);
  for (std::int64_t i = 0; i < a.num_images(); ++i) {
    CHECK(a.images[static_cast<std::size_t>(i)].rgb == b.images[static_cast<std::size_t>(i)].rgb);
    CHECK(a.labels[static_cast<std::size_t>(i)].class_ids ==
          b.labels[static_cast<std::size_t>(i)].class_ids);
  }

  for (std::int64_t i = 0; i < a.num_images(); ++i) {
    std::int64_t fg = 0;
    std::set<int> present;
    for (std::uint8_t id : a.labels[static_cast<std::size_t>(i)].class_ids)
      if (id) {
        ++fg;
        present.insert(id);
      }
    const double fraction =
        static_cast<double>(fg) / static_cast<double>(cfg.height * cfg.width);
    CHECK(fraction >= 0.05);
    CHECK(fraction <= 0.60);
    CHECK(present.size() == 1);  // one class per generated image
    CHECK(*present.begin() == static_cast<int>(i % cfg.num_classes) + 1);
  }

  // balanced catalog: every class appears in the same number of images
  for (const auto& list : a.images_by_class)
    CHECK(list.size() == static_cast<std::size_t>(cfg.num_images / cfg.num_classes));

  const SynthConfig other = [] {
    SynthConfig c = small_config();
    c.seed = 18;
    return c;
  }();
  const SegDataset c = episeg::generate_synthetic(other);
  CHECK(c.images[0].rgb != a.images[0].rgb);
}

TEST_CASE("synthetic: rejects out-of-range configurations") {
  SynthConfig cfg = small_config();
  cfg.num_classes = 16;
  CHECK_THROWS_AS(episeg::generate_synthetic(cfg), std::invalid_argument);
  cfg = small_config();
  cfg.height = 4;
  CHECK_THROWS_AS(episeg::generate_synthetic(cfg), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// disk round trip

TEST_CASE("dataset: save and load reproduce the corpus exactly") {
  const fs::path dir = temp_dir("episeg_ds_roundtrip");
  const SegDataset ds = episeg::generate_synthetic(small_config());
  episeg::save_dataset(ds, dir.string());
  const SegDataset back = episeg::load_dataset(dir.string());

  CHECK(back.class_names == ds.class_names);
  REQUIRE(back.num_images() == ds.num_images());
  for (std::int64_t i = 0; i < ds.num_images(); ++i) {
    CHECK(back.images[static_cast<std::size_t>(i)].rgb ==
          ds.images[static_cast<std::size_t>(i)].rgb);
    CHECK(back.labels[static_cast<std::size_t>(i)].class_ids ==
          ds.labels[static_cast<std::size_t>(i)].class_ids);
  }
  CHECK(back.images_by_class == ds.images_by_class);
  fs::remove_all(dir);
}

TEST_CASE("dataset: loader names the broken image/label pair") {
  const fs::path dir = temp_dir("episeg_ds_broken");
  SynthConfig cfg = small_config();
  cfg.num_images = 10;
  episeg::save_dataset(episeg::generate_synthetic(cfg), dir.string());

  SUBCASE("truncated label file") {
    std::ofstream(dir / "labels" / "0007.pgm", std::ios::binary | std::ios::trunc) << "P5\n24 24\n255\n";
    CHECK_THROWS_WITH_AS(episeg::load_dataset(dir.string()), doctest::Contains("0007"),
                         std::runtime_error);
  }
  SUBCASE("missing label file") {
    fs::remove(dir / "labels" / "0003.pgm");
    CHECK_THROWS_WITH_AS(episeg::load_dataset(dir.string()), doctest::Contains("0003"),
                         std::runtime_error);
  }
  SUBCASE("gap in image numbering") {
    fs::remove(dir / "images" / "0004.ppm");
    CHECK_THROWS_WITH_AS(episeg::load_dataset(dir.string()), doctest::Contains("contiguous"),
                         std::runtime_error);
  }
  SUBCASE("missing catalog") {
    fs::remove(dir / "catalog.txt");
    CHECK_THROWS_WITH_AS(episeg::load_dataset(dir.string()), doctest::Contains("catalog"),
                         std::runtime_error);
  }
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// training view

TEST_CASE("dataset: training view erases every held-out pixel") {
  const SegDataset ds = episeg::generate_synthetic(small_config());
  const FoldSpec fold = episeg::build_folds(5, 1, 2);  // test class {3}
  const SegDataset view = episeg::remap_to_training_view(ds, fold);

  std::int64_t held_out_pixels = 0;
  for (const auto& raster : view.labels)
    for (std::uint8_t id : raster.class_ids)
      if (id == 3) ++held_out_pixels;
  CHECK(held_out_pixels == 0);
  CHECK(view.images_by_class[2].empty());

  // training classes are untouched
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    for (std::size_t p = 0; p < ds.labels[i].class_ids.size(); ++p)
      if (ds.labels[i].class_ids[p] != 3)
        CHECK(view.labels[i].class_ids[p] == ds.labels[i].class_ids[p]);

  // the original dataset is not modified
  CHECK_FALSE(ds.images_by_class[2].empty());
}

TEST_CASE("dataset: validate_dataset flags stale class indexes") {
  SegDataset ds = episeg::generate_synthetic(small_config());
  CHECK_NOTHROW(episeg::validate_dataset(ds));
  ds.images_by_class[0].clear();
  CHECK_THROWS_WITH_AS(episeg::validate_dataset(ds), doctest::Contains("stale"),
                       std::runtime_error);
}

// ---------------------------------------------------------------------------
// episode sampling

TEST_CASE("episodes: sampled tasks satisfy the structural invariants") {
  const SegDataset ds = episeg::generate_synthetic(small_config());
  const std::vector<int> classes = {1, 2, 3, 4, 5};
  Rng rng(21);
  for (int trial = 0; trial < 500; ++trial) {
    const int k = 1 + static_cast<int>(rng.below(5));
    const Episode ep = episeg::sample_episode(ds, classes, k, rng);
    CHECK(ep.k() == k);
    CHECK(ep.key.class_id >= 1);
    CHECK(ep.key.class_id <= 5);
    CHECK(ep.query_mask.count_fg() > 0);
    std::set<std::int64_t> distinct(ep.key.support_indices.begin(),
                                    ep.key.support_indices.end());
    CHECK(distinct.size() == static_cast<std::size_t>(k));
    CHECK(distinct.count(ep.key.query_index) == 0);
    for (const BinaryMask& m : ep.support_masks) CHECK(m.count_fg() > 0);
    // masks agree with the label rasters
    const auto& raster = ds.labels[static_cast<std::size_t>(ep.key.query_index)];
    for (std::size_t p = 0; p < raster.class_ids.size(); ++p)
      CHECK((raster.class_ids[p] == ep.key.class_id) == (ep.query_mask.fg[p] == 1));
  }
}

TEST_CASE("episodes: class draw is uniform over the eligible classes") {
  const SegDataset ds = episeg::generate_synthetic(small_config());  // balanced, 5 classes
  const std::vector<int> classes = {1, 2, 3, 4, 5};
  Rng rng(4242);
  const int n = 100000;
  std::vector<int> counts(6, 0);
  for (int i = 0; i < n; ++i)
    ++counts[static_cast<std::size_t>(episeg::sample_episode_key(ds, classes, 1, rng).class_id)];
  for (int c = 1; c <= 5; ++c) {
    const double freq = static_cast<double>(counts[static_cast<std::size_t>(c)]) / n;
    CHECK(freq > 0.2 * 0.95);
    CHECK(freq < 0.2 * 1.05);
  }
}

TEST_CASE("episodes: classes without k+1 images are skipped or rejected") {
  SynthConfig cfg = small_config();
  cfg.num_images = 10;  // two images per class
  const SegDataset ds = episeg::generate_synthetic(cfg);
  Rng rng(9);
  // k = 1 needs two images: every class qualifies
  CHECK_NOTHROW(episeg::sample_episode_key(ds, {1, 2, 3, 4, 5}, 1, rng));
  // k = 2 needs three: nothing qualifies
  CHECK_THROWS_AS(episeg::sample_episode_key(ds, {1, 2, 3, 4, 5}, 2, rng), std::runtime_error);
  CHECK_THROWS_AS(episeg::sample_episode_key(ds, {1, 99}, 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(episeg::sample_episode_key(ds, {1}, 0, rng), std::invalid_argument);
}

TEST_CASE("episodes: benchmarks are reproducible by (classes, k, n, seed)") {
  const SegDataset ds = episeg::generate_synthetic(small_config());
  const auto a = episeg::build_benchmark(ds, {1, 2, 3}, 2, 50, 7);
  const auto b = episeg::build_benchmark(ds, {1, 2, 3}, 2, 50, 7);
  REQUIRE(a.size() == 50);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].query_index == b[i].query_index);
    CHECK(a[i].class_id == b[i].class_id);
    CHECK(a[i].support_indices == b[i].support_indices);
  }
  const auto c = episeg::build_benchmark(ds, {1, 2, 3}, 2, 50, 8);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].query_index != c[i].query_index || a[i].support_indices != c[i].support_indices)
      any_diff = true;
  CHECK(any_diff);

  CHECK(episeg::build_benchmark(ds, {1, 2, 3}, 2, 0, 7).empty());
  CHECK_THROWS_AS(episeg::build_benchmark(ds, {1, 2, 3}, 2, -1, 7), std::invalid_argument);
}

TEST_CASE("episodes: materialization validates the key") {
  const SegDataset ds = episeg::generate_synthetic(small_config());
  EpisodeKey key;
  key.query_index = 0;  // image 0 holds class 1
  key.class_id = 1;
  key.support_indices = {5};  // image 5 also holds class 1 (balanced round-robin)
  CHECK_NOTHROW(episeg::materialize_episode(ds, key));

  key.support_indices = {0};
  CHECK_THROWS_WITH_AS(episeg::materialize_episode(ds, key), doctest::Contains("support"),
                       std::runtime_error);

  key.support_indices = {1};  // image 1 holds class 2, not class 1
  CHECK_THROWS_AS(episeg::materialize_episode(ds, key), std::runtime_error);

  key.support_indices = {9999};
  CHECK_THROWS_AS(episeg::materialize_episode(ds, key), std::runtime_error);
}

// ---------------------------------------------------------------------------
// tensor conversions

TEST_CASE("dataset: tensor conversions scale and shape correctly") {
  episeg::SegImage im;
  im.height = 2;
  im.width = 1;
  im.rgb = {0, 255, 51, 102, 153, 204};
  const episeg::Tensor t = episeg::to_input_tensor(im);
  REQUIRE(t.shape() == (episeg::Shape{3, 2, 1}));
  CHECK(t.data()[0] == doctest::Approx(0.0));
  CHECK(t.data()[1] == doctest::Approx(1.0));
  CHECK(t.data()[2] == doctest::Approx(0.2));

  BinaryMask m;
  m.height = 1;
  m.width = 3;
  m.fg = {1, 0, 1};
  const episeg::Tensor mt = episeg::to_target_tensor(m);
  REQUIRE(mt.shape() == (episeg::Shape{1, 1, 3}));
  CHECK(mt.data()[0] == 1.0);
  CHECK(mt.data()[1] == 0.0);
  CHECK(m.count_fg() == 2);
  CHECK(m.fg_fraction() == doctest::Approx(2.0 / 3.0));
}
