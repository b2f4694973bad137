#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tinyprune/rng.hpp"
#include "tinyprune/tensor.hpp"

namespace tinyprune {

struct Dataset {
    int num_classes = 0;
    int c = 0, h = 0, w = 0;
    std::vector<std::uint8_t> images;  // N*C*H*W, channel-planar per sample
    std::vector<int> labels;
    std::vector<int> train_idx, val_idx, test_idx;

    long long count() const { return static_cast<long long>(labels.size()); }
    long long sample_bytes() const { return static_cast<long long>(c) * h * w; }
};

// CIFAR-10 binary format: data_batch_{1..5}.bin + test_batch.bin, 10000
// records of 3073 bytes each (1 label byte + 3072 RGB-planar pixel bytes).
// `val_size` samples are carved out of the 50k train split by a seeded
// shuffle. Rejects files whose size is not exactly 30,730,000 bytes.
Dataset load_cifar10(const std::string& dir, int val_size, std::uint64_t seed);

// IDX (MNIST-style) pair: images magic 0x00000803, labels magic 0x00000801.
// Dimensions are big-endian. Both splits come from one pair of files; the
// val/test carve-out is seeded like CIFAR's.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, int val_size,
                 int test_size, std::uint64_t seed);

struct SynthSpec {
    int classes = 2;
    int train_size = 4000;
    int val_size = 800;
    int test_size = 800;
    int resolution = 24;
};

// Procedural shape-and-color classification set: each class renders one of a
// few bright primitive shapes over a noisy dark background. Separable enough
// for a small CNN to exceed 95% validation accuracy within a few epochs.
// Fully deterministic given the seed.
Dataset synth_dataset(const SynthSpec& spec, std::uint64_t seed);

// Random crop (4-pixel zero pad, offsets in [0,8]) + horizontal flip, applied
// in place to a raw uint8 batch. Deterministic per (seed, epoch, sample
// index): augmenting the same sample in the same epoch twice gives identical
// bytes regardless of batch composition.
void augment_batch(std::vector<std::uint8_t>& batch, int n, int c, int h, int w,
                   const std::vector<int>& sample_indices, std::uint64_t seed, long long epoch);

// Per-channel normalization statistics of the train split, on the [0,1] scale.
struct NormStats {
    std::vector<float> mean, std;
};
NormStats compute_norm_stats(const Dataset& ds);

// Assemble a normalized float batch from dataset samples.
Tensor make_batch(const Dataset& ds, const std::vector<int>& indices, const NormStats& norm);
Tensor make_batch_raw(const std::vector<std::uint8_t>& raw, int n, int c, int h, int w,
                      const NormStats& norm);

// Epoch ordering of a split: pure function of (seed, epoch).
std::vector<int> epoch_order(const std::vector<int>& split, std::uint64_t seed, long long epoch);

}  // namespace tinyprune
