#include "tinyprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "tinyprune/error.hpp"

namespace tinyprune {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw Error("cannot open '" + path + "'");
    const auto size = is.tellg();
    is.seekg(0);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(size));
    is.read(reinterpret_cast<char*>(buf.data()), size);
    if (!is) throw Error("short read on '" + path + "'");
    return buf;
}

void carve_val(Dataset& ds, std::vector<int> train_pool, int val_size, std::uint64_t seed) {
    Rng rng = derive_rng(seed, RngStream::DataSplit);
    rng.shuffle(train_pool);
    if (val_size > static_cast<int>(train_pool.size()))
        throw Error("val split larger than the train pool");
    ds.val_idx.assign(train_pool.begin(), train_pool.begin() + val_size);
    ds.train_idx.assign(train_pool.begin() + val_size, train_pool.end());
    std::sort(ds.val_idx.begin(), ds.val_idx.end());
    std::sort(ds.train_idx.begin(), ds.train_idx.end());
}

}  // namespace

Dataset load_cifar10(const std::string& dir, int val_size, std::uint64_t seed) {
    constexpr long long kRecord = 3073;
    constexpr long long kRecords = 10000;
    constexpr long long kFileBytes = kRecord * kRecords;  // 30,730,000

    Dataset ds;
    ds.num_classes = 10;
    ds.c = 3;
    ds.h = 32;
    ds.w = 32;

    const std::vector<std::string> files = {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                            "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"};
    for (const std::string& f : files) {
        const std::string path = (std::filesystem::path(dir) / f).string();
        const std::vector<std::uint8_t> buf = read_file(path);
        if (static_cast<long long>(buf.size()) != kFileBytes)
            throw Error("'" + path + "': expected " + std::to_string(kFileBytes) + " bytes, got " +
                        std::to_string(buf.size()));
        const bool is_test = f == "test_batch.bin";
        for (long long r = 0; r < kRecords; ++r) {
            const std::uint8_t* rec = buf.data() + r * kRecord;
            const int label = rec[0];
            if (label > 9) throw Error("'" + path + "': label byte out of range");
            const int idx = static_cast<int>(ds.labels.size());
            ds.labels.push_back(label);
            ds.images.insert(ds.images.end(), rec + 1, rec + kRecord);
            if (is_test) ds.test_idx.push_back(idx);
        }
    }
    std::vector<int> train_pool(50000);
    std::iota(train_pool.begin(), train_pool.end(), 0);
    carve_val(ds, std::move(train_pool), val_size, seed);
    return ds;
}

namespace {

std::uint32_t be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path, int val_size,
                 int test_size, std::uint64_t seed) {
    const auto ibuf = read_file(images_path);
    const auto lbuf = read_file(labels_path);
    if (ibuf.size() < 16 || be32(ibuf.data()) != 0x00000803u)
        throw Error("'" + images_path + "': not an IDX image file (magic 0x00000803)");
    if (lbuf.size() < 8 || be32(lbuf.data()) != 0x00000801u)
        throw Error("'" + labels_path + "': not an IDX label file (magic 0x00000801)");
    const std::uint32_t n = be32(ibuf.data() + 4);
    const std::uint32_t rows = be32(ibuf.data() + 8);
    const std::uint32_t cols = be32(ibuf.data() + 12);
    if (be32(lbuf.data() + 4) != n) throw Error("IDX image/label counts differ");
    if (ibuf.size() != 16 + static_cast<std::size_t>(n) * rows * cols)
        throw Error("'" + images_path + "': expected " + std::to_string(16 + static_cast<long long>(n) * rows * cols) +
                    " bytes, got " + std::to_string(ibuf.size()));
    if (lbuf.size() != 8 + static_cast<std::size_t>(n)) throw Error("'" + labels_path + "': wrong size");

    Dataset ds;
    ds.c = 1;
    ds.h = static_cast<int>(rows);
    ds.w = static_cast<int>(cols);
    ds.images.assign(ibuf.begin() + 16, ibuf.end());
    int max_label = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
        ds.labels.push_back(lbuf[8 + i]);
        max_label = std::max(max_label, static_cast<int>(lbuf[8 + i]));
    }
    ds.num_classes = max_label + 1;

    std::vector<int> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    Rng rng = derive_rng(seed, RngStream::DataSplit);
    rng.shuffle(pool);
    if (test_size + val_size > static_cast<int>(n)) throw Error("IDX: splits exceed dataset size");
    ds.test_idx.assign(pool.begin(), pool.begin() + test_size);
    ds.val_idx.assign(pool.begin() + test_size, pool.begin() + test_size + val_size);
    ds.train_idx.assign(pool.begin() + test_size + val_size, pool.end());
    std::sort(ds.test_idx.begin(), ds.test_idx.end());
    std::sort(ds.val_idx.begin(), ds.val_idx.end());
    std::sort(ds.train_idx.begin(), ds.train_idx.end());
    return ds;
}

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

namespace {

struct Color {
    int r, g, b;
};

// Bright, well-separated class colors (cycled for higher class counts).
const Color kPalette[] = {{230, 60, 60}, {60, 230, 60}, {70, 70, 235}, {230, 230, 60},
                          {230, 60, 230}, {60, 230, 230}, {240, 150, 40}, {160, 60, 240}};

void render_sample(std::uint8_t* img, int res, int cls, Rng& rng) {
    // dark noisy background
    for (int i = 0; i < 3 * res * res; ++i) img[i] = static_cast<std::uint8_t>(rng.range_int(0, 45));

    const Color col = kPalette[cls % 8];
    const int shape = cls % 4;  // 0 disk, 1 square, 2 triangle, 3 ring
    const int margin = res / 4;
    const double cx = rng.uniform(margin, res - margin);
    const double cy = rng.uniform(margin, res - margin);
    const double rad = rng.uniform(0.18, 0.30) * res;

    auto inside = [&](double x, double y) {
        const double dx = x - cx, dy = y - cy;
        switch (shape) {
            case 0: return dx * dx + dy * dy <= rad * rad;
            case 1: return std::abs(dx) <= rad && std::abs(dy) <= rad;
            case 2: return dy >= -rad && (std::abs(dx) <= (dy + rad) * 0.5);
            default: {
                const double d2 = dx * dx + dy * dy;
                return d2 <= rad * rad && d2 >= 0.25 * rad * rad;
            }
        }
    };
    for (int y = 0; y < res; ++y) {
        for (int x = 0; x < res; ++x) {
            if (!inside(x + 0.5, y + 0.5)) continue;
            const int jitter = rng.range_int(-25, 25);
            const int vals[3] = {col.r, col.g, col.b};
            for (int ch = 0; ch < 3; ++ch) {
                const int v = std::clamp(vals[ch] + jitter, 0, 255);
                img[(ch * res + y) * res + x] = static_cast<std::uint8_t>(v);
            }
        }
    }
}

}  // namespace

Dataset synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
    Dataset ds;
    ds.num_classes = spec.classes;
    ds.c = 3;
    ds.h = spec.resolution;
    ds.w = spec.resolution;

    const int total = spec.train_size + spec.val_size + spec.test_size;
    ds.images.resize(static_cast<std::size_t>(total) * 3 * spec.resolution * spec.resolution);
    ds.labels.resize(static_cast<std::size_t>(total));

    Rng rng = derive_rng(seed, RngStream::Synth);
    // class-balanced within +-1 by construction: labels cycle, then shuffle order
    std::vector<int> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (int i = 0; i < total; ++i) {
        const int idx = order[static_cast<std::size_t>(i)];
        const int cls = i % spec.classes;
        ds.labels[static_cast<std::size_t>(idx)] = cls;
        Rng sample_rng(Rng::mix(Rng::mix(seed, static_cast<std::uint64_t>(RngStream::Synth)),
                                static_cast<std::uint64_t>(idx) + 1));
        render_sample(&ds.images[static_cast<std::size_t>(idx) * ds.sample_bytes()], spec.resolution, cls,
                      sample_rng);
    }
    for (int i = 0; i < spec.train_size; ++i) ds.train_idx.push_back(i);
    for (int i = 0; i < spec.val_size; ++i) ds.val_idx.push_back(spec.train_size + i);
    for (int i = 0; i < spec.test_size; ++i) ds.test_idx.push_back(spec.train_size + spec.val_size + i);
    return ds;
}

void augment_batch(std::vector<std::uint8_t>& batch, int n, int c, int h, int w,
                   const std::vector<int>& sample_indices, std::uint64_t seed, long long epoch) {
    const long long plane = static_cast<long long>(h) * w;
    std::vector<std::uint8_t> padded(static_cast<std::size_t>((h + 8) * (w + 8)));
    for (int i = 0; i < n; ++i) {
        Rng rng(Rng::mix(Rng::mix(Rng::mix(seed, static_cast<std::uint64_t>(RngStream::Augment)),
                                  static_cast<std::uint64_t>(epoch)),
                         static_cast<std::uint64_t>(sample_indices[static_cast<std::size_t>(i)]) + 1));
        const int oy = rng.range_int(0, 8);
        const int ox = rng.range_int(0, 8);
        const bool flip = rng.flip();
        for (int ch = 0; ch < c; ++ch) {
            std::uint8_t* src = &batch[static_cast<std::size_t>((static_cast<long long>(i) * c + ch) * plane)];
            std::fill(padded.begin(), padded.end(), 0);
            for (int y = 0; y < h; ++y)
                std::memcpy(&padded[static_cast<std::size_t>((y + 4) * (w + 8) + 4)], src + y * w,
                            static_cast<std::size_t>(w));
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const int sx = flip ? (w - 1 - x) : x;
                    src[y * w + x] = padded[static_cast<std::size_t>((y + oy) * (w + 8) + sx + ox)];
                }
        }
    }
}

NormStats compute_norm_stats(const Dataset& ds) {
    NormStats s;
    s.mean.assign(static_cast<std::size_t>(ds.c), 0.0f);
    s.std.assign(static_cast<std::size_t>(ds.c), 1.0f);
    const long long plane = static_cast<long long>(ds.h) * ds.w;
    for (int ch = 0; ch < ds.c; ++ch) {
        double sum = 0.0, sq = 0.0;
        long long count = 0;
        for (int idx : ds.train_idx) {
            const std::uint8_t* p = &ds.images[static_cast<std::size_t>(idx * ds.sample_bytes() + ch * plane)];
            for (long long i = 0; i < plane; ++i) {
                const double v = p[i] / 255.0;
                sum += v;
                sq += v * v;
                ++count;
            }
        }
        const double mean = sum / static_cast<double>(count);
        const double var = std::max(1e-8, sq / static_cast<double>(count) - mean * mean);
        s.mean[static_cast<std::size_t>(ch)] = static_cast<float>(mean);
        s.std[static_cast<std::size_t>(ch)] = static_cast<float>(std::sqrt(var));
    }
    return s;
}

Tensor make_batch_raw(const std::vector<std::uint8_t>& raw, int n, int c, int h, int w,
                      const NormStats& norm) {
    Tensor t({n, c, h, w});
    const long long plane = static_cast<long long>(h) * w;
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const float mean = norm.mean[static_cast<std::size_t>(ch)];
            const float inv = 1.0f / norm.std[static_cast<std::size_t>(ch)];
            const std::uint8_t* src = &raw[static_cast<std::size_t>((static_cast<long long>(i) * c + ch) * plane)];
            float* dst = &t.data[static_cast<std::size_t>((static_cast<long long>(i) * c + ch) * plane)];
            for (long long p = 0; p < plane; ++p) dst[p] = (static_cast<float>(src[p]) / 255.0f - mean) * inv;
        }
    return t;
}

Tensor make_batch(const Dataset& ds, const std::vector<int>& indices, const NormStats& norm) {
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(indices.size()) *
                                  static_cast<std::size_t>(ds.sample_bytes()));
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::memcpy(&raw[i * static_cast<std::size_t>(ds.sample_bytes())],
                    &ds.images[static_cast<std::size_t>(indices[i]) * static_cast<std::size_t>(ds.sample_bytes())],
                    static_cast<std::size_t>(ds.sample_bytes()));
    return make_batch_raw(raw, static_cast<int>(indices.size()), ds.c, ds.h, ds.w, norm);
}

std::vector<int> epoch_order(const std::vector<int>& split, std::uint64_t seed, long long epoch) {
    std::vector<int> order = split;
    Rng rng(Rng::mix(Rng::mix(seed, static_cast<std::uint64_t>(RngStream::DataOrder)),
                     static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

}  // namespace tinyprune
