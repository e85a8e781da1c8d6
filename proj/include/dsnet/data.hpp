#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dsnet/common.hpp"
#include "dsnet/tensor.hpp"

namespace dsnet {

// CHW pixel planes, values in [0,1].
struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> pix;
};

struct LabeledSample {
  Tensor pixels;  // [3, H, W]
  std::size_t label = 0;
  std::string source_id;
};

struct Dataset {
  std::vector<LabeledSample> samples;
  std::vector<std::string> class_names;
};

// Binary PPM (P6) / PGM (P5) with '#' header comments; maxval up to 65535
// (two-byte big-endian samples above 255). Pixels come out scaled by
// 1/maxval. Malformed content raises DataError naming the path.
Image read_pnm(const std::string& path);
// P6, maxval 255.
void write_ppm(const std::string& path, const Image& img);

// Replicates a single-channel image to 3 channels; passes 3-channel input
// through untouched.
Image ensure_rgb(Image img);

// Half-pixel-center bilinear with clamped borders; exact identity when the
// extents already match.
Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w);

// Layout: <root>/<class_name>/*.ppm|*.pgm. Class ids follow lexicographic
// directory order; grayscale images are replicated to 3 channels; everything
// is resized to image_size x image_size. skip_bad skips undecodable files
// instead of aborting.
Dataset load_dataset(const std::string& root, std::size_t image_size = 192,
                     bool skip_bad = false);

// Writes ds back out in the load_dataset layout (round-trip harness, and the
// `synth` CLI command).
void write_corpus(const std::string& root, const Dataset& ds);

struct SplitResult {
  Dataset train, test;
};
// Seeded shuffle, |train| = floor(train_fraction * N). The stratified flag
// applies the same rule per class instead.
SplitResult split(const Dataset& ds, double train_fraction, std::uint64_t seed,
                  bool stratified = false);

// Five ellipse classes differing in radius, eccentricity, ring-texture
// frequency, and tint, with seeded jitter on a noisy background.
Dataset synth_dataset(std::size_t n_per_class, std::size_t num_classes,
                      std::size_t image_size, std::uint64_t seed);

// Epoch ordering is derived from hash_seed(seed, epoch), so any epoch can be
// replayed without iterating the preceding ones. The final partial batch is
// kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n,
                                                    std::size_t batch_size,
                                                    bool shuffle,
                                                    std::uint64_t seed,
                                                    std::uint64_t epoch);

std::pair<Tensor, std::vector<std::size_t>> gather_batch(
    const Dataset& ds, const std::vector<std::size_t>& idx);

struct AugmentFlags {
  bool flip = false;
  bool rotate = false;  // uniform in [-15, 15] degrees, nearest neighbor
  bool shift = false;   // uniform in [-8, 8] pixels, edge padded
};

void hflip_chw(std::vector<double>& pix, std::size_t c, std::size_t h,
               std::size_t w);
std::vector<double> rotate_nn_chw(const std::vector<double>& pix,
                                  std::size_t c, std::size_t h, std::size_t w,
                                  double degrees);
std::vector<double> shift_edge_chw(const std::vector<double>& pix,
                                   std::size_t c, std::size_t h, std::size_t w,
                                   std::ptrdiff_t dy, std::ptrdiff_t dx);

void augment_batch(Tensor& batch, const AugmentFlags& flags, Rng& rng);

}  // namespace dsnet
