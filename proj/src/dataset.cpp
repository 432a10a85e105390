#include "episeg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "episeg/image_io.hpp"
#include "episeg/rng.hpp"

namespace fs = std::filesystem;

namespace episeg {

namespace {

constexpr std::uint64_t kGeneratorStreamTag = 0x67656e00u;   // "gen"
constexpr std::uint64_t kBenchmarkStreamTag = 0x62656e63u;   // "benc"

[[noreturn]] void fail(const std::string& why) { throw std::runtime_error(why); }

}  // namespace

std::int64_t BinaryMask::count_fg() const {
  std::int64_t n = 0;
  for (std::uint8_t v : fg) n += v ? 1 : 0;
  return n;
}

double BinaryMask::fg_fraction() const {
  if (fg.empty()) return 0.0;
  return static_cast<double>(count_fg()) / static_cast<double>(fg.size());
}

void reindex_dataset(SegDataset& ds) {
  ds.images_by_class.assign(static_cast<std::size_t>(ds.num_classes()), {});
  for (std::int64_t i = 0; i < ds.num_images(); ++i) {
    std::vector<bool> present(static_cast<std::size_t>(ds.num_classes()) + 1, false);
    for (std::uint8_t id : ds.labels[static_cast<std::size_t>(i)].class_ids)
      if (id != 0 && id <= ds.num_classes()) present[id] = true;
    for (std::int64_t c = 1; c <= ds.num_classes(); ++c)
      if (present[static_cast<std::size_t>(c)])
        ds.images_by_class[static_cast<std::size_t>(c - 1)].push_back(i);
  }
}

void validate_dataset(const SegDataset& ds) {
  if (ds.images.size() != ds.labels.size())
    fail("dataset: image and label counts differ");
  if (ds.num_classes() == 0) fail("dataset: empty class catalog");
  for (std::int64_t i = 0; i < ds.num_images(); ++i) {
    const SegImage& im = ds.images[static_cast<std::size_t>(i)];
    const LabelRaster& lb = ds.labels[static_cast<std::size_t>(i)];
    const std::string where = "dataset: image " + std::to_string(i);
    if (im.height <= 0 || im.width <= 0 ||
        im.rgb.size() != static_cast<std::size_t>(3 * im.height * im.width))
      fail(where + ": inconsistent pixel buffer");
    if (lb.height != im.height || lb.width != im.width)
      fail(where + ": label raster size differs from image");
    if (lb.class_ids.size() != static_cast<std::size_t>(lb.height * lb.width))
      fail(where + ": inconsistent label buffer");
    for (std::uint8_t id : lb.class_ids)
      if (id > ds.num_classes()) fail(where + ": label id beyond catalog");
  }
  SegDataset copy;
  copy.class_names = ds.class_names;
  copy.labels = ds.labels;
  copy.images.resize(ds.images.size());
  reindex_dataset(copy);
  if (copy.images_by_class != ds.images_by_class)
    fail("dataset: class index is stale; run reindex_dataset");
}

FoldSpec build_folds(std::int64_t num_classes, int classes_per_fold, int fold) {
  if (classes_per_fold <= 0 || num_classes <= 0)
    throw std::invalid_argument("build_folds: sizes must be positive");
  if (num_classes % classes_per_fold != 0)
    throw std::invalid_argument("build_folds: classes_per_fold must divide the class count");
  const int num_folds = static_cast<int>(num_classes) / classes_per_fold;
  if (fold < 0 || fold >= num_folds)
    throw std::invalid_argument("build_folds: fold index out of range");
  FoldSpec spec;
  spec.fold = fold;
  for (int c = 1; c <= static_cast<int>(num_classes); ++c) {
    const bool held_out =
        c > classes_per_fold * fold && c <= classes_per_fold * (fold + 1);
    (held_out ? spec.test_classes : spec.train_classes).push_back(c);
  }
  return spec;
}

SegDataset remap_to_training_view(const SegDataset& ds, const FoldSpec& fold) {
  SegDataset view = ds;
  std::vector<bool> held(static_cast<std::size_t>(ds.num_classes()) + 1, false);
  for (int c : fold.test_classes) {
    if (c < 1 || c > ds.num_classes())
      throw std::invalid_argument("remap_to_training_view: fold class beyond catalog");
    held[static_cast<std::size_t>(c)] = true;
  }
  for (LabelRaster& lb : view.labels)
    for (std::uint8_t& id : lb.class_ids)
      if (id != 0 && held[id]) id = 0;
  reindex_dataset(view);
  return view;
}

// ---- episodes ---------------------------------------------------------------

EpisodeKey sample_episode_key(const SegDataset& ds, const std::vector<int>& classes, int k,
                              Rng& rng) {
  if (k < 1) throw std::invalid_argument("sample_episode_key: k must be at least 1");
  std::vector<int> eligible;
  for (int c : classes) {
    if (c < 1 || c > ds.num_classes())
      throw std::invalid_argument("sample_episode_key: class id beyond catalog");
    if (ds.images_by_class[static_cast<std::size_t>(c - 1)].size() >=
        static_cast<std::size_t>(k) + 1)
      eligible.push_back(c);
  }
  if (eligible.empty())
    fail("sample_episode_key: no listed class has k+1 annotated images");

  EpisodeKey key;
  key.class_id = eligible[static_cast<std::size_t>(rng.below(eligible.size()))];
  std::vector<std::int64_t> pool = ds.images_by_class[static_cast<std::size_t>(key.class_id - 1)];
  // partial Fisher-Yates: the first k+1 slots become the draw
  for (int i = 0; i <= k; ++i) {
    const std::size_t j =
        static_cast<std::size_t>(i) +
        static_cast<std::size_t>(rng.below(pool.size() - static_cast<std::size_t>(i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  key.query_index = pool[0];
  key.support_indices.assign(pool.begin() + 1, pool.begin() + 1 + k);
  return key;
}

BinaryMask mask_for_class(const LabelRaster& labels, int class_id) {
  BinaryMask mask;
  mask.height = labels.height;
  mask.width = labels.width;
  mask.fg.resize(labels.class_ids.size());
  for (std::size_t i = 0; i < labels.class_ids.size(); ++i)
    mask.fg[i] = labels.class_ids[i] == class_id ? 1 : 0;
  return mask;
}

Episode materialize_episode(const SegDataset& ds, const EpisodeKey& key) {
  auto check_index = [&](std::int64_t index) {
    if (index < 0 || index >= ds.num_images())
      fail("materialize_episode: image index out of range");
  };
  check_index(key.query_index);
  for (std::int64_t s : key.support_indices) {
    check_index(s);
    if (s == key.query_index) fail("materialize_episode: query also appears as support");
  }

  Episode ep;
  ep.key = key;
  ep.query_image = ds.images[static_cast<std::size_t>(key.query_index)];
  ep.query_mask = mask_for_class(ds.labels[static_cast<std::size_t>(key.query_index)], key.class_id);
  if (ep.query_mask.count_fg() == 0)
    fail("materialize_episode: query has no pixels of the episode class");
  for (std::int64_t s : key.support_indices) {
    ep.support_images.push_back(ds.images[static_cast<std::size_t>(s)]);
    ep.support_masks.push_back(mask_for_class(ds.labels[static_cast<std::size_t>(s)], key.class_id));
    if (ep.support_masks.back().count_fg() == 0)
      fail("materialize_episode: support has no pixels of the episode class");
  }
  return ep;
}

Episode sample_episode(const SegDataset& ds, const std::vector<int>& classes, int k, Rng& rng) {
  return materialize_episode(ds, sample_episode_key(ds, classes, k, rng));
}

std::vector<EpisodeKey> build_benchmark(const SegDataset& ds, const std::vector<int>& classes,
                                        int k, std::int64_t n, std::uint64_t seed) {
  if (n < 0) throw std::invalid_argument("build_benchmark: n must be non-negative");
  Rng rng(derive_seed(seed, kBenchmarkStreamTag));
  std::vector<EpisodeKey> keys;
  keys.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) keys.push_back(sample_episode_key(ds, classes, k, rng));
  return keys;
}

void save_benchmark(const std::vector<EpisodeKey>& keys, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("save_benchmark: cannot open " + path);
  for (const EpisodeKey& key : keys) {
    out << key.query_index << ' ' << key.class_id;
    for (std::int64_t s : key.support_indices) out << ' ' << s;
    out << '\n';
  }
  if (!out) fail("save_benchmark: write failed for " + path);
}

std::vector<EpisodeKey> load_benchmark(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("load_benchmark: cannot open " + path);
  std::vector<EpisodeKey> keys;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    EpisodeKey key;
    if (!(fields >> key.query_index >> key.class_id))
      fail("load_benchmark: malformed line in " + path);
    std::int64_t s = 0;
    while (fields >> s) key.support_indices.push_back(s);
    if (!fields.eof()) fail("load_benchmark: malformed line in " + path);
    if (key.support_indices.empty())
      fail("load_benchmark: episode without supports in " + path);
    keys.push_back(std::move(key));
  }
  return keys;
}

// ---- synthetic corpus -------------------------------------------------------

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double hue_deg, double sat, double val) {
  const double h = std::fmod(std::fmod(hue_deg, 360.0) + 360.0, 360.0) / 60.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = val * (1.0 - sat);
  const double q = val * (1.0 - sat * f);
  const double t = val * (1.0 - sat * (1.0 - f));
  switch (sector) {
    case 0: return {val, t, p};
    case 1: return {q, val, p};
    case 2: return {p, val, t};
    case 3: return {p, q, val};
    case 4: return {t, p, val};
    default: return {val, p, q};
  }
}

std::uint8_t quantize(double v) {
  const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(q);
}

// Point-in-shape tests in the instance frame (origin at the center, axes
// rotated with the instance, r the nominal radius).
bool inside_shape(int geometry, double x, double y, double r) {
  switch (geometry) {
    case 0:  // circle
      return x * x + y * y <= r * r;
    case 1:  // square, side chosen so the area is close to the circle's
      return std::abs(x) <= 0.82 * r && std::abs(y) <= 0.82 * r;
    case 2: {  // equilateral triangle with circumradius r
      const double v0x = 0.0, v0y = -r;
      const double v1x = 0.8660254037844386 * r, v1y = 0.5 * r;
      const double v2x = -0.8660254037844386 * r, v2y = 0.5 * r;
      auto side = [x, y](double ax, double ay, double bx, double by) {
        return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
      };
      return side(v0x, v0y, v1x, v1y) >= 0 && side(v1x, v1y, v2x, v2y) >= 0 &&
             side(v2x, v2y, v0x, v0y) >= 0;
    }
    case 3: {  // ring
      const double q = x * x + y * y;
      return q <= r * r && q >= 0.55 * 0.55 * r * r;
    }
    default:  // cross
      return (std::abs(x) <= 0.35 * r && std::abs(y) <= r) ||
             (std::abs(y) <= 0.35 * r && std::abs(x) <= r);
  }
}

// 0 solid, 1 striped (diagonal bands), 2 dotted (dark dot grid).
double texture_factor(int texture, std::int64_t ix, std::int64_t iy) {
  switch (texture) {
    case 1: return ((ix + iy) / 3) % 2 == 0 ? 1.0 : 0.45;
    case 2: return (ix % 4 < 2 && iy % 4 < 2) ? 0.45 : 1.0;
    default: return 1.0;
  }
}

std::string class_display_name(int class_id) {
  static const char* geometry[] = {"circle", "square", "triangle", "ring", "cross"};
  static const char* texture[] = {"solid", "striped", "dotted"};
  return std::string(geometry[(class_id - 1) % 5]) + "-" + texture[(class_id - 1) / 5];
}

}  // namespace

SegDataset generate_synthetic(const SynthConfig& cfg) {
  if (cfg.num_classes < 1 || cfg.num_classes > 15)
    throw std::invalid_argument("generate_synthetic: num_classes must be in [1, 15]");
  if (cfg.num_images < 1 || cfg.height < 8 || cfg.width < 8)
    throw std::invalid_argument("generate_synthetic: corpus too small");

  SegDataset ds;
  for (int c = 1; c <= cfg.num_classes; ++c) ds.class_names.push_back(class_display_name(c));

  Rng rng(derive_seed(cfg.seed, kGeneratorStreamTag));
  const std::int64_t h = cfg.height, w = cfg.width;
  const double rmin = 0.18 * static_cast<double>(std::min(h, w));
  const double rmax = 0.34 * static_cast<double>(std::min(h, w));

  for (std::int64_t idx = 0; idx < cfg.num_images; ++idx) {
    const int class_id = static_cast<int>(idx % cfg.num_classes) + 1;  // balanced catalog
    const int geometry = (class_id - 1) % 5;
    const int texture = (class_id - 1) / 5;
    const double hue = std::fmod(static_cast<double>(class_id - 1) * 137.508, 360.0);

    SegImage image;
    image.height = h;
    image.width = w;
    image.rgb.resize(static_cast<std::size_t>(3 * h * w));
    LabelRaster raster;
    raster.height = h;
    raster.width = w;

    bool accepted = false;
    for (int attempt = 0; attempt < 100 && !accepted; ++attempt) {
      // background: dim random color with per-pixel noise
      const Rgb bg = hsv_to_rgb(rng.uniform(0.0, 360.0), 0.3, rng.uniform(0.15, 0.45));
      raster.class_ids.assign(static_cast<std::size_t>(h * w), 0);
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const double n = rng.uniform(-0.05, 0.05);
          const std::size_t px = static_cast<std::size_t>(y * w + x);
          image.rgb[px] = quantize(bg.r + n);
          image.rgb[static_cast<std::size_t>(h * w) + px] = quantize(bg.g + n);
          image.rgb[static_cast<std::size_t>(2 * h * w) + px] = quantize(bg.b + n);
        }

      const int instances = rng.real01() < 0.35 ? 2 : 1;
      for (int inst = 0; inst < instances; ++inst) {
        const double cx = rng.uniform(0.25, 0.75) * static_cast<double>(w);
        const double cy = rng.uniform(0.25, 0.75) * static_cast<double>(h);
        const double r = rng.uniform(rmin, rmax);
        const double angle = rng.uniform(0.0, 6.283185307179586);
        const double ca = std::cos(angle), sa = std::sin(angle);
        const Rgb fg = hsv_to_rgb(hue + rng.uniform(-8.0, 8.0), 0.85, rng.uniform(0.7, 1.0));
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            const double lx = ca * dx + sa * dy;
            const double ly = -sa * dx + ca * dy;
            if (!inside_shape(geometry, lx, ly, r)) continue;
            const double t = texture_factor(texture, x, y);
            const std::size_t px = static_cast<std::size_t>(y * w + x);
            image.rgb[px] = quantize(fg.r * t);
            image.rgb[static_cast<std::size_t>(h * w) + px] = quantize(fg.g * t);
            image.rgb[static_cast<std::size_t>(2 * h * w) + px] = quantize(fg.b * t);
            raster.class_ids[px] = static_cast<std::uint8_t>(class_id);
          }
      }

      std::int64_t fg_count = 0;
      for (std::uint8_t id : raster.class_ids) fg_count += id ? 1 : 0;
      const double fraction = static_cast<double>(fg_count) / static_cast<double>(h * w);
      accepted = fraction >= 0.05 && fraction <= 0.60;
    }
    if (!accepted)
      fail("generate_synthetic: could not reach 5-60% coverage for class " +
           std::to_string(class_id));
    ds.images.push_back(std::move(image));
    ds.labels.push_back(std::move(raster));
  }

  reindex_dataset(ds);
  validate_dataset(ds);
  return ds;
}

// ---- disk format --------------------------------------------------------------

namespace {

std::string image_stem(std::int64_t index) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

}  // namespace

void save_dataset(const SegDataset& ds, const std::string& dir) {
  validate_dataset(ds);
  if (ds.num_images() > 9999) fail("save_dataset: more than 9999 images");
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "labels");

  std::ofstream catalog(fs::path(dir) / "catalog.txt", std::ios::trunc);
  if (!catalog) fail("save_dataset: cannot write catalog.txt in " + dir);
  for (std::int64_t c = 1; c <= ds.num_classes(); ++c)
    catalog << c << "\t" << ds.class_names[static_cast<std::size_t>(c - 1)] << "\n";
  catalog.close();

  for (std::int64_t i = 0; i < ds.num_images(); ++i) {
    const SegImage& im = ds.images[static_cast<std::size_t>(i)];
    const LabelRaster& lb = ds.labels[static_cast<std::size_t>(i)];
    RgbBuffer rgb{im.height, im.width, im.rgb};
    write_ppm((fs::path(dir) / "images" / (image_stem(i) + ".ppm")).string(), rgb);
    GrayBuffer gray{lb.height, lb.width, lb.class_ids};
    write_pgm((fs::path(dir) / "labels" / (image_stem(i) + ".pgm")).string(), gray);
  }
}

SegDataset load_dataset(const std::string& dir) {
  SegDataset ds;

  std::ifstream catalog(fs::path(dir) / "catalog.txt");
  if (!catalog) fail("load_dataset: missing catalog.txt in " + dir);
  std::string line;
  int expected_id = 1;
  while (std::getline(catalog, line)) {
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) fail("load_dataset: catalog line without tab: " + line);
    int id = 0;
    try {
      id = std::stoi(line.substr(0, tab));
    } catch (const std::logic_error&) {
      fail("load_dataset: bad class id in catalog line: " + line);
    }
    if (id != expected_id) fail("load_dataset: class ids must be contiguous from 1");
    ds.class_names.push_back(line.substr(tab + 1));
    ++expected_id;
  }
  if (ds.class_names.empty()) fail("load_dataset: empty catalog in " + dir);

  std::vector<fs::path> image_files;
  const fs::path image_dir = fs::path(dir) / "images";
  if (!fs::is_directory(image_dir)) fail("load_dataset: missing images/ in " + dir);
  for (const auto& entry : fs::directory_iterator(image_dir))
    if (entry.path().extension() == ".ppm") image_files.push_back(entry.path());
  std::sort(image_files.begin(), image_files.end());
  if (image_files.empty()) fail("load_dataset: no images in " + dir);

  for (std::size_t i = 0; i < image_files.size(); ++i) {
    const std::string stem = image_files[i].stem().string();
    if (stem != image_stem(static_cast<std::int64_t>(i)))
      fail("load_dataset: image ids must be contiguous; unexpected file " +
           image_files[i].filename().string());
    const fs::path label_path = fs::path(dir) / "labels" / (stem + ".pgm");
    try {
      RgbBuffer rgb = read_ppm(image_files[i].string());
      GrayBuffer gray = read_pgm(label_path.string());
      if (gray.height != rgb.height || gray.width != rgb.width)
        fail("label raster size differs from image");
      ds.images.push_back(SegImage{rgb.height, rgb.width, std::move(rgb.planar)});
      ds.labels.push_back(LabelRaster{gray.height, gray.width, std::move(gray.values)});
    } catch (const std::exception& e) {
      fail("load_dataset: image/label pair " + stem + ": " + e.what());
    }
  }

  reindex_dataset(ds);
  validate_dataset(ds);
  return ds;
}

// ---- tensor conversions ------------------------------------------------------

Tensor to_input_tensor(const SegImage& image) {
  std::vector<double> data(image.rgb.size());
  for (std::size_t i = 0; i < image.rgb.size(); ++i)
    data[i] = static_cast<double>(image.rgb[i]) / 255.0;
  return Tensor::from_data({3, image.height, image.width}, std::move(data));
}

Tensor to_target_tensor(const BinaryMask& mask) {
  std::vector<double> data(mask.fg.size());
  for (std::size_t i = 0; i < mask.fg.size(); ++i) data[i] = mask.fg[i] ? 1.0 : 0.0;
  return Tensor::from_data({1, mask.height, mask.width}, std::move(data));
}

}  // namespace episeg
