#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "helix/rng.hpp"
#include "helix/tensor.hpp"

namespace helix {

// ---------------------------------------------------------------------------
// Raw tensor interchange format: magic "HXT1", u8 dtype (1=f32, 2=f64),
// u8 rank, padding to 8 bytes, rank x u32 little-endian dims, payload LE.
// ---------------------------------------------------------------------------

enum class RawDtype : std::uint8_t { F32 = 1, F64 = 2 };

void write_raw_tensor(const std::string& path, const Tensor& t, RawDtype dtype = RawDtype::F64);
Tensor read_raw_tensor(const std::string& path);

// PPM (P6, maxval 255) ingestion; returns (3,H,W) in [0,1].
Tensor read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Tensor& image);  // values clamped to [0,1]
// PGM (P5) grayscale output from a (H,W) byte map.
void write_pgm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& bytes);

/// Bilinear resize of a (C,H,W) image.
Tensor resize_bilinear(const Tensor& image, int out_h, int out_w);

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct ClassSamples {
  std::string name;
  std::vector<Tensor> images;  // (3,S,S) in [0,1], loaded eagerly
};

struct DatasetSplit {
  std::vector<ClassSamples> base, val, novel;
  int image_size = 0;
  std::array<double, 3> norm_mean{0, 0, 0};  // per-channel stats of the base split
  std::array<double, 3> norm_std{1, 1, 1};
};

/// Loads root/{base,val,novel}/<class>/<sample>.{hxt,ppm}. PPM inputs are
/// resized to `resize_to`; .hxt tensors are used as-is. Base-split
/// normalization statistics are computed at load time.
DatasetSplit load_dataset(const std::string& root_dir, int resize_to = 84);

const std::vector<ClassSamples>& split_classes(const DatasetSplit& ds, const std::string& which);

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

struct Episode {
  int n_way = 0, k_shot = 0, q_per = 0;
  std::vector<int> classes;                     // indices into the source split, size N
  std::vector<std::pair<int, int>> support;     // (class slot, sample index), grouped per class
  std::vector<std::pair<int, int>> query;       // q-major: query i has label i / q_per... see labels
  std::vector<int> query_labels;                // episode-local labels in [0, N)
};

/// Uniform class choice without replacement, then uniform sample choice
/// without replacement; support and query are disjoint.
Episode sample_episode(const std::vector<ClassSamples>& classes, int n_way, int k_shot, int q_per,
                       Rng& rng);

/// Elementwise mean of K same-shape feature maps (class prototype).
Tensor prototype_support(const std::vector<Tensor>& features);

// ---------------------------------------------------------------------------
// Synthetic fine-grained dataset generator
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int genera = 20;
  int species_per_genus = 4;
  int samples_per_species = 40;
  int image_size = 84;
  int part_size = 16;
  int translate_jitter = 6;   // pixels
  double rotate_jitter = 0.5; // radians, glyph-local
  double hue_jitter = 0.12;   // relative per-channel scale
  int clutter_blobs = 3;      // per-sample background distractor blobs
  std::uint64_t seed = 0;
  // Genus-level split fractions (by count): remaining genera become novel.
  int base_genera = -1, val_genera = -1;  // -1: 60% / 15% defaults
};

struct Jitter {
  int dx = 0, dy = 0;
  double rot = 0;
  std::array<double, 3> hue{1, 1, 1};
  // Background distractors {cx, cy, glyph kind, r, g, b}: part-like glyph
  // patches with random tint drawn outside the body silhouette, so pooled
  // image statistics alone cannot tell the on-body part from the clutter.
  std::vector<std::array<double, 6>> blobs;
};

Jitter sample_jitter(const SyntheticSpec& spec, Rng& rng);

/// One rendered sample: species differences are confined to the part region.
Tensor render_sample(const SyntheticSpec& spec, int genus, int species, const Jitter& jit);

/// Part region pixel box {x0, y0, x1, y1} (half-open) for a given jitter.
std::array<int, 4> part_region_box(const SyntheticSpec& spec, int genus, const Jitter& jit);

/// Writes the full dataset tree under root: root/{base,val,novel}/gXX_sYY/*.hxt.
void generate_synthetic(const SyntheticSpec& spec, const std::string& root);

}  // namespace helix
