#ifndef NBNET_DATA_HPP
#define NBNET_DATA_HPP

#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbnet/errors.hpp"
#include "nbnet/image_io.hpp"
#include "nbnet/tensor.hpp"

namespace nbnet {

using json = nlohmann::json;

struct Landmarks {
    // left eye, right eye, nose tip, left mouth corner, right mouth corner
    std::array<double, 10> xy;
};

struct ManifestEntry {
    std::string path;
    std::string subject_id;
    std::string sample_id;
    std::optional<Landmarks> landmarks;
    std::string partition;
};

struct ImageManifest {
    std::vector<ManifestEntry> entries;

    std::size_t size() const { return entries.size(); }

    std::vector<std::string> subjects() const {
        std::vector<std::string> out;
        std::set<std::string> seen;
        for (auto& e : entries)
            if (seen.insert(e.subject_id).second) out.push_back(e.subject_id);
        return out;
    }
};

/**
 * Manifest format: JSON Lines, one object per entry with fields `path`,
 * `subject_id`, `sample_id`, optional `landmarks` (flat [x1,y1,...,x5,y5])
 * and optional `partition`. Entry order is the file order.
 */
inline ImageManifest load_manifest(const std::string& path, bool check_paths = true) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open manifest: " + path);
    ImageManifest m;
    std::set<std::pair<std::string, std::string>> seen;
    std::string line;
    long lineno = 0;
    bool any = false;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        any = true;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(std::string("manifest parse error: ") + e.what(), lineno);
        }
        ManifestEntry e;
        for (const char* field : {"path", "subject_id", "sample_id"})
            if (!j.contains(field))
                throw ParseError(std::string("manifest entry missing field '") + field + "'",
                                 lineno);
        try {
            e.path = j.at("path").get<std::string>();
            e.subject_id = j.at("subject_id").get<std::string>();
            e.sample_id = j.at("sample_id").get<std::string>();
            if (j.contains("partition")) e.partition = j.at("partition").get<std::string>();
            if (j.contains("landmarks") && !j.at("landmarks").is_null()) {
                auto arr = j.at("landmarks").get<std::vector<double>>();
                if (arr.size() != 10)
                    throw ParseError("landmarks must have 10 values [x1,y1,...,x5,y5], got " +
                                     std::to_string(arr.size()), lineno);
                Landmarks lm;
                for (int i = 0; i < 10; ++i) lm.xy[std::size_t(i)] = arr[std::size_t(i)];
                e.landmarks = lm;
            }
        } catch (const json::exception& ex) {
            throw ParseError(std::string("manifest field error: ") + ex.what(), lineno);
        }
        if (!seen.insert({e.subject_id, e.sample_id}).second)
            throw ParseError("duplicate identity (" + e.subject_id + ", " + e.sample_id + ")",
                             lineno);
        if (check_paths) {
            std::ifstream probe(e.path, std::ios::binary);
            if (!probe)
                throw ParseError("image path does not resolve: " + e.path, lineno);
        }
        m.entries.push_back(std::move(e));
    }
    if (!any) throw ParseError("manifest is empty: " + path, 1);
    return m;
}

inline void save_manifest(const std::string& path, const ImageManifest& m) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write manifest: " + path);
    for (auto& e : m.entries) {
        json j{{"path", e.path}, {"subject_id", e.subject_id}, {"sample_id", e.sample_id}};
        if (!e.partition.empty()) j["partition"] = e.partition;
        if (e.landmarks) {
            j["landmarks"] = std::vector<double>(e.landmarks->xy.begin(), e.landmarks->xy.end());
        }
        os << j.dump() << "\n";
    }
}

/** Normalized image in [-1,1], CHW, with identity metadata. */
template <class T>
struct FaceImage {
    Tensor<T> pixels;  // (3, size, size)
    std::string subject_id;
    std::string sample_id;
};

// out = raw / 127.5 - 1
template <class T>
Tensor<T> normalize_pixels(const Tensor<T>& raw) {
    Tensor<T> out(raw.shape);
    for (std::size_t i = 0; i < raw.numel(); ++i) {
        if (raw[i] < T(0) || raw[i] > T(255))
            throw ValidationError("normalize_pixels: value " + std::to_string(double(raw[i])) +
                                  " outside [0,255]");
        out[i] = raw[i] / T(127.5) - T(1);
    }
    return out;
}

template <class T>
Tensor<T> denormalize_pixels(const Tensor<T>& norm) {
    Tensor<T> out(norm.shape);
    for (std::size_t i = 0; i < norm.numel(); ++i) out[i] = (norm[i] + T(1)) * T(127.5);
    return out;
}

template <class T>
Tensor<T> image_to_tensor(const RawImage& img) {
    Tensor<T> raw({3, std::size_t(img.height), std::size_t(img.width)});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const unsigned char* p = img.px(y, x);
            for (int c = 0; c < 3; ++c)
                raw[(std::size_t(c) * img.height + y) * img.width + x] = T(p[c]);
        }
    return normalize_pixels(raw);
}

template <class T>
RawImage tensor_to_image(const Tensor<T>& chw) {
    if (chw.rank() != 3 || chw.shape[0] != 3)
        throw ShapeError("tensor_to_image expects (3,H,W), got " + shape_str(chw.shape));
    RawImage img;
    img.height = int(chw.shape[1]);
    img.width = int(chw.shape[2]);
    img.rgb.resize(std::size_t(img.width) * img.height * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = (double(chw[(std::size_t(c) * img.height + y) * img.width + x]) + 1.0) *
                           127.5;
                v = std::min(255.0, std::max(0.0, std::round(v)));
                img.px(y, x)[c] = (unsigned char)(v);
            }
    return img;
}

/**
 * Canonical 5-point target layout, defined on a 112x112 crop and scaled
 * linearly to the working resolution. Order matches Landmarks.
 */
inline Landmarks canonical_landmarks(int out_size) {
    static const double base[10] = {38.2946, 51.6963, 73.5318, 51.5014, 56.0252,
                                    71.7366, 41.5493, 92.3655, 70.7299, 92.2041};
    Landmarks lm;
    double s = double(out_size) / 112.0;
    for (int i = 0; i < 10; ++i) lm.xy[std::size_t(i)] = base[i] * s;
    return lm;
}

struct SimilarityTransform {
    // maps source (x,y) -> (a*x - b*y + tx, b*x + a*y + ty)
    double a = 1, b = 0, tx = 0, ty = 0;

    std::pair<double, double> apply(double x, double y) const {
        return {a * x - b * y + tx, b * x + a * y + ty};
    }

    SimilarityTransform inverse() const {
        double det = a * a + b * b;
        if (det < 1e-20) throw DegenerateLandmarksError("similarity transform is singular");
        SimilarityTransform inv;
        inv.a = a / det;
        inv.b = -b / det;
        inv.tx = (-a * tx - b * ty) / det;
        inv.ty = (b * tx - a * ty) / det;
        return inv;
    }
};

/**
 * Least-squares similarity transform taking `src` points onto `dst`.
 * Rejects degenerate configurations (coincident or collinear points), which
 * leave rotation or the full transform underdetermined for alignment use.
 */
inline SimilarityTransform fit_similarity(const Landmarks& src, const Landmarks& dst) {
    double mx = 0, my = 0;
    for (int i = 0; i < 5; ++i) {
        mx += src.xy[2 * std::size_t(i)];
        my += src.xy[2 * std::size_t(i) + 1];
    }
    mx /= 5;
    my /= 5;
    // second moments of the centered source points
    double sxx = 0, sxy = 0, syy = 0;
    for (int i = 0; i < 5; ++i) {
        double x = src.xy[2 * std::size_t(i)] - mx, y = src.xy[2 * std::size_t(i) + 1] - my;
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    double tr = sxx + syy;
    double det2 = sxx * syy - sxy * sxy;
    double disc = std::sqrt(std::max(0.0, tr * tr / 4 - det2));
    double lam_min = tr / 2 - disc;
    if (tr < 1e-12 || lam_min < 1e-9 * std::max(tr, 1.0))
        throw DegenerateLandmarksError(
            "landmarks are coincident or collinear; similarity transform is ill-conditioned");

    // normal equations for [a b tx ty]
    double sx = 0, sy = 0, su = 0, sv = 0, sxu = 0, sxv = 0, syu = 0, syv = 0, sq = 0;
    for (int i = 0; i < 5; ++i) {
        double x = src.xy[2 * std::size_t(i)], y = src.xy[2 * std::size_t(i) + 1];
        double u = dst.xy[2 * std::size_t(i)], v = dst.xy[2 * std::size_t(i) + 1];
        sx += x; sy += y; su += u; sv += v;
        sq += x * x + y * y;
        sxu += x * u; sxv += x * v; syu += y * u; syv += y * v;
    }
    const double n = 5;
    // Solve the 2x2 reduced system after eliminating tx, ty.
    double cxx = sq - (sx * sx + sy * sy) / n;
    double r1 = (sxu + syv) - (sx * su + sy * sv) / n;
    double r2 = (sxv - syu) - (sx * sv - sy * su) / n;
    SimilarityTransform t;
    t.a = r1 / cxx;
    t.b = r2 / cxx;
    t.tx = (su - t.a * sx + t.b * sy) / n;
    t.ty = (sv - t.b * sx - t.a * sy) / n;
    return t;
}

inline double bilinear_sample(const RawImage& img, double x, double y, int c) {
    // clamp-to-edge sampling
    x = std::min(std::max(x, 0.0), double(img.width - 1));
    y = std::min(std::max(y, 0.0), double(img.height - 1));
    int x0 = int(std::floor(x)), y0 = int(std::floor(y));
    int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
    double fx = x - x0, fy = y - y0;
    double v00 = img.px(y0, x0)[c], v01 = img.px(y0, x1)[c];
    double v10 = img.px(y1, x0)[c], v11 = img.px(y1, x1)[c];
    return (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy;
}

/**
 * Aligns a raw image by fitting the similarity transform that carries its
 * landmarks onto the canonical layout, then resampling an out_size crop and
 * normalizing to [-1,1].
 */
template <class T>
FaceImage<T> align_and_crop(const RawImage& raw, const Landmarks& landmarks, int out_size) {
    if (out_size < 16) throw ValidationError("align_and_crop: out_size must be >= 16");
    SimilarityTransform fwd = fit_similarity(landmarks, canonical_landmarks(out_size));
    SimilarityTransform inv = fwd.inverse();
    Tensor<T> px({3, std::size_t(out_size), std::size_t(out_size)});
    for (int y = 0; y < out_size; ++y)
        for (int x = 0; x < out_size; ++x) {
            auto [sx, sy] = inv.apply(double(x), double(y));
            for (int c = 0; c < 3; ++c)
                px[(std::size_t(c) * out_size + y) * out_size + x] =
                    T(bilinear_sample(raw, sx, sy, c) / 127.5 - 1.0);
        }
    FaceImage<T> out;
    out.pixels = std::move(px);
    return out;
}

// Loads one manifest entry at the working resolution. Entries without
// landmarks are assumed pre-aligned and are only resized by center crop or
// plain bilinear scaling.
template <class T>
FaceImage<T> load_face(const ManifestEntry& e, int out_size) {
    RawImage raw = read_image(e.path);
    FaceImage<T> out;
    if (e.landmarks) {
        out = align_and_crop<T>(raw, *e.landmarks, out_size);
    } else if (raw.width == out_size && raw.height == out_size) {
        out.pixels = image_to_tensor<T>(raw);
    } else {
        Tensor<T> px({3, std::size_t(out_size), std::size_t(out_size)});
        double sx = double(raw.width) / out_size, sy = double(raw.height) / out_size;
        for (int y = 0; y < out_size; ++y)
            for (int x = 0; x < out_size; ++x)
                for (int c = 0; c < 3; ++c)
                    px[(std::size_t(c) * out_size + y) * out_size + x] =
                        T(bilinear_sample(raw, (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5, c) /
                              127.5 - 1.0);
        out.pixels = std::move(px);
    }
    out.subject_id = e.subject_id;
    out.sample_id = e.sample_id;
    return out;
}

}

#endif
