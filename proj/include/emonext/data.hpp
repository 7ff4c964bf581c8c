#pragma once

// FER2013 CSV ingestion, augmentation, resizing, normalization and
// deterministic batch iteration.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "emonext/rng.hpp"
#include "emonext/tensor.hpp"

namespace emonext {

constexpr int kImageSize = 48;
constexpr int kNumClasses = 7;
constexpr int kImagePixels = kImageSize * kImageSize;

inline const std::array<std::string, kNumClasses>& class_names() {
    static const std::array<std::string, kNumClasses> names{
        "angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"};
    return names;
}

enum class Split { Train = 0, Validation = 1, Test = 2 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "val";
        default: return "test";
    }
}

struct Sample {
    std::vector<float> image;  // 48x48, row-major, values in [0, 1]
    int64_t label = 0;         // 0..6
    Split split = Split::Train;
};

struct DatasetSummary {
    // counts[split][class]
    std::array<std::array<int64_t, kNumClasses>, 3> counts{};

    int64_t split_total(Split s) const {
        int64_t t = 0;
        for (int64_t c : counts[static_cast<size_t>(s)]) t += c;
        return t;
    }
    int64_t class_total(int64_t cls) const {
        int64_t t = 0;
        for (const auto& row : counts) t += row[static_cast<size_t>(cls)];
        return t;
    }
    int64_t total() const {
        return split_total(Split::Train) + split_total(Split::Validation) +
               split_total(Split::Test);
    }
};

struct Dataset {
    std::vector<Sample> samples;
    DatasetSummary summary;

    std::vector<const Sample*> split(Split s) const {
        std::vector<const Sample*> out;
        for (const auto& smp : samples)
            if (smp.split == s) out.push_back(&smp);
        return out;
    }
};

// Expects header "emotion,pixels,Usage"; pixels are 2304 space-separated
// integers 0..255; Usage maps Training/PublicTest/PrivateTest to
// train/validation/test.
inline Dataset parse_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "emotion,pixels,Usage")
        throw DataError(path + ": expected header 'emotion,pixels,Usage', got '" + line + "'");

    Dataset ds;
    int64_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        size_t c1 = line.find(',');
        size_t c2 = line.rfind(',');
        if (c1 == std::string::npos || c2 == c1)
            throw DataError(path + ": malformed row " + std::to_string(row));

        Sample s;
        try {
            s.label = std::stoll(line.substr(0, c1));
        } catch (const std::exception&) {
            throw DataError(path + ": row " + std::to_string(row) + ": bad emotion field");
        }
        if (s.label < 0 || s.label >= kNumClasses)
            throw DataError(path + ": row " + std::to_string(row) + ": label " +
                            std::to_string(s.label) + " outside 0..6");

        std::string usage = line.substr(c2 + 1);
        if (usage == "Training")
            s.split = Split::Train;
        else if (usage == "PublicTest")
            s.split = Split::Validation;
        else if (usage == "PrivateTest")
            s.split = Split::Test;
        else
            throw DataError(path + ": row " + std::to_string(row) + ": unknown Usage '" + usage + "'");

        s.image.reserve(kImagePixels);
        const char* p = line.c_str() + c1 + 1;
        const char* end = line.c_str() + c2;
        while (p < end) {
            while (p < end && *p == ' ') ++p;
            if (p >= end) break;
            int v = 0;
            bool any = false;
            while (p < end && *p >= '0' && *p <= '9') {
                v = v * 10 + (*p - '0');
                ++p;
                any = true;
            }
            if (!any || (p < end && *p != ' '))
                throw DataError(path + ": row " + std::to_string(row) + ": bad pixel data");
            if (v > 255)
                throw DataError(path + ": row " + std::to_string(row) + ": pixel value " +
                                std::to_string(v) + " > 255");
            s.image.push_back(static_cast<float>(v) / 255.0f);
        }
        if (static_cast<int>(s.image.size()) != kImagePixels)
            throw DataError(path + ": row " + std::to_string(row) + ": expected " +
                            std::to_string(kImagePixels) + " pixels, got " +
                            std::to_string(s.image.size()));

        ds.summary.counts[static_cast<size_t>(s.split)][static_cast<size_t>(s.label)]++;
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw DataError(path + ": no data rows");
    return ds;
}

// ---------------------------------------------------------------------------
// image transforms (plain float arrays, no tape)
// ---------------------------------------------------------------------------

// reflect-pad 4 then crop 48x48 at (offset_y, offset_x) in 0..8, then rotate
// by angle_deg about the image center with bilinear resampling and zero fill.
// (offset 4,4, angle 0) is the identity.
inline std::vector<float> augment_with(const std::vector<float>& img, int offset_y, int offset_x,
                                       double angle_deg) {
    constexpr int pad = 4;
    auto reflect = [&](int i) {
        if (i < 0) i = -i;
        if (i >= kImageSize) i = 2 * kImageSize - 2 - i;
        return i;
    };
    std::vector<float> cropped(kImagePixels);
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) {
            int sy = reflect(y + offset_y - pad);
            int sx = reflect(x + offset_x - pad);
            cropped[static_cast<size_t>(y * kImageSize + x)] =
                img[static_cast<size_t>(sy * kImageSize + sx)];
        }
    if (angle_deg == 0.0) return cropped;

    double rad = angle_deg * 3.14159265358979323846 / 180.0;
    double ca = std::cos(rad), sa = std::sin(rad);
    double cx = (kImageSize - 1) / 2.0, cy = (kImageSize - 1) / 2.0;
    std::vector<float> out(kImagePixels, 0.0f);
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) {
            // inverse rotation of the target coordinate
            double dx = x - cx, dy = y - cy;
            double sxf = ca * dx + sa * dy + cx;
            double syf = -sa * dx + ca * dy + cy;
            int x0 = static_cast<int>(std::floor(sxf));
            int y0 = static_cast<int>(std::floor(syf));
            double fx = sxf - x0, fy = syf - y0;
            auto tap = [&](int yy, int xx) -> double {
                if (yy < 0 || yy >= kImageSize || xx < 0 || xx >= kImageSize) return 0.0;
                return cropped[static_cast<size_t>(yy * kImageSize + xx)];
            };
            out[static_cast<size_t>(y * kImageSize + x)] = static_cast<float>(
                (1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1)) +
                fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1)));
        }
    return out;
}

inline std::vector<float> augment(const std::vector<float>& img, Rng& rng) {
    int oy = static_cast<int>(rng.uniform_int(9));
    int ox = static_cast<int>(rng.uniform_int(9));
    double angle = rng.uniform(-10.0, 10.0);
    return augment_with(img, oy, ox, angle);
}

// bilinear, align-corners; resize to the source size is the identity
inline std::vector<float> resize(const std::vector<float>& img, int src, int target) {
    if (target < 1) throw DimensionError("resize: target must be >= 1");
    if (target == src) return img;
    std::vector<float> out(static_cast<size_t>(target) * target);
    for (int y = 0; y < target; ++y) {
        double syf = target > 1 ? static_cast<double>(y) * (src - 1) / (target - 1) : (src - 1) / 2.0;
        int y0 = std::min(static_cast<int>(std::floor(syf)), src - 2);
        if (src == 1) y0 = 0;
        double fy = syf - y0;
        for (int x = 0; x < target; ++x) {
            double sxf = target > 1 ? static_cast<double>(x) * (src - 1) / (target - 1) : (src - 1) / 2.0;
            int x0 = std::min(static_cast<int>(std::floor(sxf)), src - 2);
            if (src == 1) x0 = 0;
            double fx = sxf - x0;
            auto at = [&](int yy, int xx) {
                return static_cast<double>(img[static_cast<size_t>(yy * src + xx)]);
            };
            double v;
            if (src == 1)
                v = at(0, 0);
            else
                v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                    fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out[static_cast<size_t>(y * target + x)] = static_cast<float>(v);
        }
    }
    return out;
}

// [0,1] -> [-1,1]
inline void normalize(std::vector<float>& img) {
    for (auto& v : img) v = (v - 0.5f) / 0.5f;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

template <typename T>
struct Batch {
    Tensor<T> images;  // [B, 1, S, S], normalized
    std::vector<int64_t> labels;
};

// Training batches: permutation is a pure function of (seed, epoch); each
// sample is augmented with its own (seed, epoch, index)-derived stream.
// Eval batches: source order, no augmentation.
template <typename T>
std::vector<Batch<T>> make_batches(const std::vector<const Sample*>& samples, int64_t batch_size,
                                   int64_t target_size, bool training, uint64_t seed,
                                   uint64_t epoch) {
    if (batch_size < 1) throw ContractError("batch size must be >= 1");
    if (samples.empty()) throw DataError("empty dataset split");

    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (training) {
        Rng perm_rng({seed, epoch, 0x5157FFULL});
        for (size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[static_cast<size_t>(perm_rng.uniform_int(static_cast<int64_t>(i + 1)))]);
    }

    std::vector<Batch<T>> batches;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
        size_t count = std::min(static_cast<size_t>(batch_size), order.size() - start);
        Batch<T> b;
        b.images = Tensor<T>({static_cast<int64_t>(count), 1, target_size, target_size});
        for (size_t k = 0; k < count; ++k) {
            size_t idx = order[start + k];
            const Sample& s = *samples[idx];
            std::vector<float> img = s.image;
            if (training) {
                Rng aug_rng({seed, epoch, 0xA06ULL, static_cast<uint64_t>(idx)});
                img = augment(img, aug_rng);
            }
            img = resize(img, kImageSize, static_cast<int>(target_size));
            normalize(img);
            auto* dst = b.images.data().data() + static_cast<int64_t>(k) * target_size * target_size;
            for (size_t i = 0; i < img.size(); ++i) dst[i] = static_cast<T>(img[i]);
            b.labels.push_back(s.label);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// PGM (P5) input for single-image prediction
// ---------------------------------------------------------------------------

inline std::vector<float> read_pgm_48(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image file: " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw DataError(path + ": not a binary PGM (P5) file");
    auto next_int = [&]() {
        // skips whitespace and '#' comments
        for (;;) {
            int c = in.peek();
            if (c == '#') {
                std::string skip;
                std::getline(in, skip);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        int v;
        if (!(in >> v)) throw DataError(path + ": malformed PGM header");
        return v;
    };
    int w = next_int(), h = next_int(), maxval = next_int();
    if (w != kImageSize || h != kImageSize)
        throw DataError(path + ": expected 48x48 image, got " + std::to_string(w) + "x" +
                        std::to_string(h));
    if (maxval != 255) throw DataError(path + ": expected 8-bit PGM (maxval 255)");
    in.get();  // single whitespace before pixel data
    std::vector<unsigned char> raw(kImagePixels);
    in.read(reinterpret_cast<char*>(raw.data()), kImagePixels);
    if (in.gcount() != kImagePixels) throw DataError(path + ": truncated pixel data");
    std::vector<float> img(kImagePixels);
    for (int i = 0; i < kImagePixels; ++i) img[static_cast<size_t>(i)] = raw[static_cast<size_t>(i)] / 255.0f;
    return img;
}

}  // namespace emonext
