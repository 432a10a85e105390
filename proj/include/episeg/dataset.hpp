#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "episeg/tensor.hpp"

namespace episeg {

class Rng;

// RGB image, planar uint8 ([channel][row][col]). Values are quantized at
// generation time so saving and reloading reproduces them exactly.
struct SegImage {
  std::int64_t height = 0, width = 0;
  std::vector<std::uint8_t> rgb;  // 3 * height * width
};

// Per-pixel class ids; 0 is background, foreground classes are 1-based.
struct LabelRaster {
  std::int64_t height = 0, width = 0;
  std::vector<std::uint8_t> class_ids;
};

// Foreground mask for a single class (values 0 or 1).
struct BinaryMask {
  std::int64_t height = 0, width = 0;
  std::vector<std::uint8_t> fg;

  std::int64_t count_fg() const;
  double fg_fraction() const;
};

// An annotated image collection plus the class catalog.
struct SegDataset {
  std::vector<SegImage> images;
  std::vector<LabelRaster> labels;                       // parallel to images
  std::vector<std::string> class_names;                  // class_names[c-1] names class c
  std::vector<std::vector<std::int64_t>> images_by_class;  // [c-1] -> image indices containing c

  std::int64_t num_images() const { return static_cast<std::int64_t>(images.size()); }
  std::int64_t num_classes() const { return static_cast<std::int64_t>(class_names.size()); }
};

// Checks the cross-references above (parallel arrays, label ids within the
// catalog, image/label dimensions equal, index lists consistent with the
// rasters) and throws std::runtime_error on the first violation.
void validate_dataset(const SegDataset& ds);

// Rebuilds images_by_class from the label rasters.
void reindex_dataset(SegDataset& ds);

// Class-wise split: fold f holds out classes {cpf*f + 1, ..., cpf*f + cpf}
// for testing and trains on all the others. num_classes must be a multiple
// of classes_per_fold.
struct FoldSpec {
  int fold = 0;
  std::vector<int> test_classes;
  std::vector<int> train_classes;
};

FoldSpec build_folds(std::int64_t num_classes, int classes_per_fold, int fold);

// Training view of a dataset: every pixel labelled with a held-out class is
// rewritten to background, so no test-class annotation can leak into
// episodic training. Class ids keep their original values.
SegDataset remap_to_training_view(const SegDataset& ds, const FoldSpec& fold);

// One segmentation task: a query image plus k support image/mask pairs, all
// annotated for the same class. Pixel data is copied in so episodes stay
// valid independent of the dataset and across threads.
struct EpisodeKey {
  std::int64_t query_index = -1;
  int class_id = 0;
  std::vector<std::int64_t> support_indices;
};

struct Episode {
  EpisodeKey key;
  SegImage query_image;
  BinaryMask query_mask;
  std::vector<SegImage> support_images;
  std::vector<BinaryMask> support_masks;

  int k() const { return static_cast<int>(support_images.size()); }
};

// Draws a class uniformly from `classes` (restricted to classes with at
// least k+1 annotated images) and then k+1 distinct images of it. Throws
// std::runtime_error if no listed class has enough images.
EpisodeKey sample_episode_key(const SegDataset& ds, const std::vector<int>& classes, int k,
                              Rng& rng);
Episode materialize_episode(const SegDataset& ds, const EpisodeKey& key);
Episode sample_episode(const SegDataset& ds, const std::vector<int>& classes, int k, Rng& rng);

// Fixed evaluation set: n episode keys drawn with the dataset-independent
// stream (seed). The same (dataset, classes, k, n, seed) always yields the
// same keys.
std::vector<EpisodeKey> build_benchmark(const SegDataset& ds, const std::vector<int>& classes,
                                        int k, std::int64_t n, std::uint64_t seed);

// Text manifest, one episode per line: "<query> <class> <support...>".
void save_benchmark(const std::vector<EpisodeKey>& keys, const std::string& path);
std::vector<EpisodeKey> load_benchmark(const std::string& path);

// ---- synthetic corpus ------------------------------------------------------

// Classes combine a geometry with a fill texture; class id c uses
// geometry (c-1) % 5 and texture (c-1) / 5, capping the catalog at 15
// classes. Every image contains instances of exactly one class over a noisy
// background, with pose, scale and brightness jitter, and is resampled until
// the foreground covers between 5% and 60% of the pixels.
struct SynthConfig {
  std::int64_t num_classes = 10;  // at most 15
  std::int64_t num_images = 400;
  std::int64_t height = 32;
  std::int64_t width = 32;
  std::uint64_t seed = 0;
};

SegDataset generate_synthetic(const SynthConfig& cfg);

// On-disk layout under `dir`:
//   catalog.txt        one "<id>\t<name>" line per class
//   images/NNNN.ppm    RGB images, 4-digit zero-padded contiguous ids
//   labels/NNNN.pgm    class-id rasters parallel to the images
// Loading revalidates everything and reports the offending image id when an
// image/label pair is broken.
void save_dataset(const SegDataset& ds, const std::string& dir);
SegDataset load_dataset(const std::string& dir);

// Model-side conversions.
Tensor to_input_tensor(const SegImage& image);      // [3,H,W], values in [0,1]
Tensor to_target_tensor(const BinaryMask& mask);    // [1,H,W], values in {0,1}
BinaryMask mask_for_class(const LabelRaster& labels, int class_id);

}  // namespace episeg
