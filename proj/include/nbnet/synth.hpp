#ifndef NBNET_SYNTH_HPP
#define NBNET_SYNTH_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "nbnet/data.hpp"
#include "nbnet/image_io.hpp"
#include "nbnet/rng.hpp"

namespace nbnet {

/**
 * Procedural toy-face dataset used by the test suites and the desk-scale
 * pipeline. Every subject is a parameter vector (face shape, colors, feature
 * geometry); every sample adds pose/lighting jitter. Rendering is pure given
 * (seed, subject, sample), so datasets regenerate identically.
 */
struct SynthSpec {
    int subjects = 40;
    int samples_per_subject = 6;
    int size = 32;
    std::uint64_t seed = 1;
    // When true, faces are drawn displaced on a larger canvas and the true
    // landmark positions are recorded, to exercise the alignment path.
    bool with_landmarks = false;
    int canvas = 0;  // 0 means same as size
};

namespace detail {

struct FaceParams {
    double skin[3], bg[3], eye[3], mouth[3], hair[3];
    double face_rx, face_ry;
    double eye_y, eye_dx, eye_r;
    double brow_dy, brow_w;
    double nose_w, nose_l;
    double mouth_y, mouth_w, mouth_h;
    double hair_top;
};

inline FaceParams face_params(std::uint64_t seed, int subject) {
    Rng rng(mix_seed(seed, 0xFACE0000ull + std::uint64_t(subject)));
    FaceParams p;
    auto color = [&](double lo, double hi, double* c) {
        for (int i = 0; i < 3; ++i) c[i] = rng.uniform(lo, hi);
    };
    color(0.55, 0.95, p.skin);
    color(0.05, 0.45, p.bg);
    color(0.02, 0.25, p.eye);
    p.mouth[0] = rng.uniform(0.45, 0.85);
    p.mouth[1] = rng.uniform(0.05, 0.30);
    p.mouth[2] = rng.uniform(0.10, 0.35);
    color(0.05, 0.55, p.hair);
    p.face_rx = rng.uniform(0.28, 0.40);
    p.face_ry = rng.uniform(0.34, 0.46);
    p.eye_y = rng.uniform(0.36, 0.46);
    p.eye_dx = rng.uniform(0.13, 0.22);
    p.eye_r = rng.uniform(0.035, 0.07);
    p.brow_dy = rng.uniform(0.06, 0.11);
    p.brow_w = rng.uniform(0.05, 0.12);
    p.nose_w = rng.uniform(0.02, 0.05);
    p.nose_l = rng.uniform(0.08, 0.16);
    p.mouth_y = rng.uniform(0.66, 0.78);
    p.mouth_w = rng.uniform(0.10, 0.19);
    p.mouth_h = rng.uniform(0.02, 0.05);
    p.hair_top = rng.uniform(0.10, 0.22);
    return p;
}

struct Jitter {
    double dx, dy, scale, gain, tint[3], noise;
};

inline Jitter sample_jitter(std::uint64_t seed, int subject, int sample) {
    Rng rng(mix_seed(seed, 0x5A3E0000ull + std::uint64_t(subject) * 100003ull +
                               std::uint64_t(sample)));
    Jitter j;
    j.dx = rng.uniform(-0.05, 0.05);
    j.dy = rng.uniform(-0.05, 0.05);
    j.scale = rng.uniform(0.90, 1.10);
    j.gain = rng.uniform(0.82, 1.14);
    for (int i = 0; i < 3; ++i) j.tint[i] = rng.uniform(-0.05, 0.05);
    j.noise = 0.02;
    return j;
}

inline double smooth_in(double d) {
    // 1 inside (d<=0), soft 1px falloff outside
    if (d <= 0) return 1.0;
    if (d >= 1) return 0.0;
    return 1.0 - d * d * (3 - 2 * d);
}

inline double ellipse_d(double x, double y, double cx, double cy, double rx, double ry,
                        double px_scale) {
    double q = std::sqrt(((x - cx) / rx) * ((x - cx) / rx) + ((y - cy) / ry) * ((y - cy) / ry));
    // approximate signed distance in pixels
    return (q - 1.0) * std::min(rx, ry) / px_scale;
}

}  // namespace detail

struct SynthFace {
    RawImage image;
    Landmarks landmarks;
    std::string subject_id;
    std::string sample_id;
};

inline SynthFace synth_face(const SynthSpec& spec, int subject, int sample) {
    const int canvas = spec.canvas > 0 ? spec.canvas : spec.size;
    const double S = double(spec.size);
    detail::FaceParams p = detail::face_params(spec.seed, subject);
    detail::Jitter jt = detail::sample_jitter(spec.seed, subject, sample);

    // face frame: unit coords [0,1] of the nominal crop, jittered
    double cx = 0.5 + jt.dx + (canvas - spec.size) * 0.5 / S;
    double cy = 0.5 + jt.dy + (canvas - spec.size) * 0.5 / S;
    double sc = jt.scale;

    Rng noise_rng(mix_seed(spec.seed, 0x4015E000ull + std::uint64_t(subject) * 131071ull +
                                     std::uint64_t(sample)));
    RawImage img;
    img.width = img.height = canvas;
    img.rgb.resize(std::size_t(canvas) * canvas * 3);

    auto put = [&](int x, int y, const double* rgb, double alpha) {
        unsigned char* q = img.px(y, x);
        for (int c = 0; c < 3; ++c) {
            double cur = q[c] / 255.0;
            double v = cur * (1 - alpha) + rgb[c] * alpha;
            q[c] = (unsigned char)(std::min(255.0, std::max(0.0, v * 255.0 + 0.5)));
        }
    };

    double eye_lx = cx - p.eye_dx * sc, eye_rx2 = cx + p.eye_dx * sc;
    double eye_y = cy + (p.eye_y - 0.5) * sc;
    double mouth_y = cy + (p.mouth_y - 0.5) * sc;
    double nose_tip_y = cy + (p.eye_y - 0.5 + p.nose_l) * sc;

    for (int y = 0; y < canvas; ++y)
        for (int x = 0; x < canvas; ++x) {
            double u = (x + 0.5) / S, v = (y + 0.5) / S;
            put(x, y, p.bg, 1.0);
            double dface = detail::ellipse_d(u, v, cx, cy, p.face_rx * sc, p.face_ry * sc, 1.0 / S);
            put(x, y, p.skin, detail::smooth_in(dface));
            // hair: top of the head, clipped to slightly above the face ellipse
            double dhair = detail::ellipse_d(u, v, cx, cy - 0.04 * sc, (p.face_rx + 0.03) * sc,
                                             (p.face_ry + 0.03) * sc, 1.0 / S);
            if (v < cy - (0.5 - p.hair_top) * sc)
                put(x, y, p.hair, detail::smooth_in(dhair));
            for (double ex : {eye_lx, eye_rx2}) {
                double de = detail::ellipse_d(u, v, ex, eye_y, p.eye_r * sc, p.eye_r * sc, 1.0 / S);
                put(x, y, p.eye, detail::smooth_in(de));
                double db = detail::ellipse_d(u, v, ex, eye_y - p.brow_dy * sc, p.brow_w * sc,
                                              0.016 * sc, 1.0 / S);
                put(x, y, p.hair, detail::smooth_in(db) * 0.9);
            }
            double dn = detail::ellipse_d(u, v, cx, nose_tip_y - p.nose_l * sc * 0.5,
                                          p.nose_w * sc, p.nose_l * sc * 0.5, 1.0 / S);
            double shade[3] = {p.skin[0] * 0.8, p.skin[1] * 0.8, p.skin[2] * 0.8};
            put(x, y, shade, detail::smooth_in(dn) * 0.8);
            double dm = detail::ellipse_d(u, v, cx, mouth_y, p.mouth_w * sc, p.mouth_h * sc,
                                          1.0 / S);
            put(x, y, p.mouth, detail::smooth_in(dm));
        }

    // lighting gain, tint, sensor noise
    for (int y = 0; y < canvas; ++y)
        for (int x = 0; x < canvas; ++x) {
            unsigned char* q = img.px(y, x);
            for (int c = 0; c < 3; ++c) {
                double v = q[c] / 255.0;
                v = v * jt.gain + jt.tint[c] + jt.noise * noise_rng.normal();
                q[c] = (unsigned char)(std::min(255.0, std::max(0.0, v * 255.0 + 0.5)));
            }
        }

    SynthFace out;
    out.image = std::move(img);
    out.subject_id = "s" + std::to_string(subject);
    out.sample_id = "a" + std::to_string(sample);
    double px = S;
    out.landmarks.xy = {eye_lx * px, eye_y * px, eye_rx2 * px, eye_y * px,
                        cx * px,     nose_tip_y * px,
                        (cx - p.mouth_w * sc) * px, mouth_y * px,
                        (cx + p.mouth_w * sc) * px, mouth_y * px};
    return out;
}

// Writes PNGs plus manifest.jsonl into dir; returns the manifest path.
// Samples alternate between partitions "fa" and "fb".
inline std::string write_synth_dataset(const std::string& dir, const SynthSpec& spec) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    ImageManifest m;
    for (int s = 0; s < spec.subjects; ++s)
        for (int a = 0; a < spec.samples_per_subject; ++a) {
            SynthFace f = synth_face(spec, s, a);
            std::string name = f.subject_id + "_" + f.sample_id + ".png";
            std::string path = (fs::path(dir) / name).string();
            write_png(path, f.image);
            ManifestEntry e;
            e.path = path;
            e.subject_id = f.subject_id;
            e.sample_id = f.sample_id;
            e.partition = (a % 2 == 0) ? "fa" : "fb";
            if (spec.with_landmarks) e.landmarks = f.landmarks;
            m.entries.push_back(e);
        }
    std::string mpath = (fs::path(dir) / "manifest.jsonl").string();
    save_manifest(mpath, m);
    return mpath;
}

}

#endif
