#ifndef NBNET_ATTACK_EVAL_HPP
#define NBNET_ATTACK_EVAL_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbnet/data.hpp"
#include "nbnet/errors.hpp"
#include "nbnet/extractor.hpp"
#include "nbnet/nbnet.hpp"
#include "nbnet/stats.hpp"
#include "nbnet/svg.hpp"

namespace nbnet {

/**
 * Units, used consistently below: FAR values are fractions in (0,1); TAR and
 * rank-1 rates are percentages in [0,100]. Verification accepts a probe when
 * score >= threshold, thresholds come from observed impostor scores only (no
 * interpolation), and fold aggregation reports mean - population stddev.
 */

struct ScoreSet {
    std::vector<double> genuine;
    std::vector<double> impostor;
    int fold_id = 0;
    std::string attack_kind;  // type1 | type2 | original
};

struct VerificationRow {
    double far = 0;        // requested FAR, fraction
    double threshold = 0;  // accept when score >= threshold
    double tar = 0;        // percent
};

struct VerificationResult {
    int fold_id = 0;
    std::vector<VerificationRow> rows;
    std::vector<std::pair<double, double>> roc;  // (far fraction, tar percent)
};

struct AggregateRow {
    double far = 0;
    double mu = 0;
    double sigma = 0;
    double reported = 0;  // mu - sigma
    double mean_threshold = 0;
};

struct EvalFold {
    int id = 0;
    std::vector<std::size_t> image_indices;
};

// Subject-disjoint folds: subjects are shuffled under the seed and dealt into
// n_folds contiguous groups of near-equal size.
inline std::vector<EvalFold> make_folds(const ImageManifest& manifest, int n_folds,
                                        std::uint64_t seed) {
    if (n_folds < 1) throw ValidationError("make_folds: need n_folds >= 1");
    std::vector<std::string> subjects = manifest.subjects();
    if (int(subjects.size()) < n_folds)
        throw ValidationError("make_folds: " + std::to_string(subjects.size()) +
                              " subjects cannot fill " + std::to_string(n_folds) + " folds");
    Rng rng(mix_seed(seed, 0xf01d5ull));
    rng.shuffle(subjects.begin(), subjects.end());
    std::map<std::string, int> fold_of;
    for (std::size_t i = 0; i < subjects.size(); ++i)
        fold_of[subjects[i]] = int(i * std::size_t(n_folds) / subjects.size());
    std::vector<EvalFold> folds(n_folds);
    for (int f = 0; f < n_folds; ++f) folds[f].id = f;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i)
        folds[fold_of[manifest.entries[i].subject_id]].image_indices.push_back(i);
    return folds;
}

/**
 * Image source for the genuine side of an attack. The model-backed variant
 * inverts templates; the identity variant plays back the source images (the
 * "original" baseline rows), and the constant variant is a degenerate probe
 * for tests.
 */
template <class T = float>
class Reconstructor {
public:
    virtual ~Reconstructor() = default;
    virtual std::string name() const = 0;
    // templates (N,d); source_images (N,3,S,S), the images the templates
    // were extracted from. Returns (N,3,S,S).
    virtual Tensor<T> reconstruct(const Tensor<T>& templates,
                                  const Tensor<T>& source_images) = 0;
};

template <class T = float>
class ModelReconstructor : public Reconstructor<T> {
public:
    ModelReconstructor(const ReconstructionModel<T>& model, std::string name)
        : model_(&model), name_(std::move(name)) {}

    std::string name() const override { return name_; }

    Tensor<T> reconstruct(const Tensor<T>& templates, const Tensor<T>&) override {
        Tensor<T> y = templates.reshaped({templates.dim(0), templates.dim(1), 1, 1});
        return model_->infer(y);
    }

private:
    const ReconstructionModel<T>* model_;
    std::string name_;
};

template <class T = float>
class IdentityReconstructor : public Reconstructor<T> {
public:
    std::string name() const override { return "identity"; }
    Tensor<T> reconstruct(const Tensor<T>&, const Tensor<T>& source_images) override {
        return source_images;
    }
};

template <class T = float>
class ConstantReconstructor : public Reconstructor<T> {
public:
    explicit ConstantReconstructor(Tensor<T> image) : image_(std::move(image)) {}
    std::string name() const override { return "constant"; }
    Tensor<T> reconstruct(const Tensor<T>& templates, const Tensor<T>&) override {
        Tensor<T> out({templates.dim(0), image_.dim(0), image_.dim(1), image_.dim(2)});
        for (std::size_t i = 0; i < templates.dim(0); ++i)
            std::copy_n(image_.data(), image_.numel(), out.data() + i * image_.numel());
        return out;
    }

private:
    Tensor<T> image_;  // (3,S,S)
};

namespace detail {

template <class T>
struct FoldData {
    Tensor<T> images;                       // (M,3,S,S)
    Tensor<T> templates;                    // (M,d)
    std::vector<std::string> subjects;
    std::vector<std::string> samples;
};

template <class T>
FoldData<T> load_fold(const ImageManifest& manifest, const ExtractorHandle<T>& ex,
                      const EvalFold& fold) {
    if (fold.image_indices.empty()) throw ValidationError("empty fold");
    const int s = ex.info().input_size;
    FoldData<T> fd;
    fd.images = Tensor<T>({fold.image_indices.size(), 3, std::size_t(s), std::size_t(s)});
    std::size_t per = 3 * std::size_t(s) * s;
    for (std::size_t i = 0; i < fold.image_indices.size(); ++i) {
        const ManifestEntry& e = manifest.entries.at(fold.image_indices[i]);
        FaceImage<T> f = load_face<T>(e, s);
        std::copy_n(f.pixels.data(), per, fd.images.data() + i * per);
        fd.subjects.push_back(e.subject_id);
        fd.samples.push_back(e.sample_id);
    }
    fd.templates = ex.extract_batch(fd.images);
    return fd;
}

template <class T>
std::vector<double> impostor_scores(const Tensor<T>& templates,
                                    const std::vector<std::string>& subjects) {
    const std::size_t n = templates.dim(0), d = templates.dim(1);
    std::vector<double> out;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (subjects[i] != subjects[j])
                out.push_back(cosine_raw(templates.data() + i * d, templates.data() + j * d, d));
    return out;
}

}  // namespace detail

// Type-I: each test image's template is inverted and the reconstruction is
// matched back against that same image's template.
template <class T = float>
ScoreSet build_type1_scores(const ImageManifest& originals, Reconstructor<T>& model,
                            const ExtractorHandle<T>& extractor, const EvalFold& fold) {
    detail::FoldData<T> fd = detail::load_fold(originals, extractor, fold);
    Tensor<T> recon = model.reconstruct(fd.templates, fd.images);
    Tensor<T> recon_t = extractor.extract_batch(recon);
    const std::size_t d = fd.templates.dim(1);
    ScoreSet s;
    s.fold_id = fold.id;
    s.attack_kind = "type1";
    for (std::size_t i = 0; i < fd.templates.dim(0); ++i)
        s.genuine.push_back(cosine_raw(fd.templates.data() + i * d, recon_t.data() + i * d, d));
    s.impostor = detail::impostor_scores(fd.templates, fd.subjects);
    return s;
}

struct GenuinePair {
    std::size_t a = 0, b = 0;  // manifest indices, same subject, distinct samples
};

// Unordered same-subject sample combinations within the fold, reconstructing
// from the earlier manifest entry of each pair.
inline std::vector<GenuinePair> make_genuine_pairs(const ImageManifest& manifest,
                                                   const EvalFold& fold) {
    std::vector<GenuinePair> pairs;
    for (std::size_t i = 0; i < fold.image_indices.size(); ++i)
        for (std::size_t j = i + 1; j < fold.image_indices.size(); ++j) {
            std::size_t a = fold.image_indices[i], b = fold.image_indices[j];
            if (manifest.entries[a].subject_id == manifest.entries[b].subject_id)
                pairs.push_back({a, b});
        }
    return pairs;
}

// Type-II: reconstruct from sample a's template, match against sample b's.
template <class T = float>
ScoreSet build_type2_scores(const ImageManifest& originals,
                            const std::vector<GenuinePair>& genuine_pairs,
                            Reconstructor<T>& model, const ExtractorHandle<T>& extractor,
                            const EvalFold& fold) {
    for (auto& p : genuine_pairs) {
        const ManifestEntry& ea = originals.entries.at(p.a);
        const ManifestEntry& eb = originals.entries.at(p.b);
        if (ea.subject_id != eb.subject_id)
            throw ValidationError("type2 pair (" + ea.subject_id + "," + eb.subject_id +
                                  ") crosses subjects");
        if (ea.sample_id == eb.sample_id)
            throw ValidationError("type2 pair repeats sample " + ea.subject_id + "/" +
                                  ea.sample_id);
    }
    detail::FoldData<T> fd = detail::load_fold(originals, extractor, fold);
    std::map<std::size_t, std::size_t> pos;
    for (std::size_t i = 0; i < fold.image_indices.size(); ++i)
        pos[fold.image_indices[i]] = i;

    const std::size_t d = fd.templates.dim(1);
    const std::size_t per = fd.images.numel() / fd.images.dim(0);
    Tensor<T> a_templates({genuine_pairs.size(), d});
    Tensor<T> a_images({genuine_pairs.size(), 3, fd.images.dim(2), fd.images.dim(3)});
    for (std::size_t k = 0; k < genuine_pairs.size(); ++k) {
        auto it = pos.find(genuine_pairs[k].a);
        if (it == pos.end() || !pos.count(genuine_pairs[k].b))
            throw ValidationError("type2 pair references an image outside the fold");
        std::copy_n(fd.templates.data() + it->second * d, d, a_templates.data() + k * d);
        std::copy_n(fd.images.data() + it->second * per, per, a_images.data() + k * per);
    }
    ScoreSet s;
    s.fold_id = fold.id;
    s.attack_kind = "type2";
    if (!genuine_pairs.empty()) {
        Tensor<T> recon = model.reconstruct(a_templates, a_images);
        Tensor<T> recon_t = extractor.extract_batch(recon);
        for (std::size_t k = 0; k < genuine_pairs.size(); ++k) {
            std::size_t bi = pos[genuine_pairs[k].b];
            s.genuine.push_back(
                cosine_raw(fd.templates.data() + bi * d, recon_t.data() + k * d, d));
        }
    }
    s.impostor = detail::impostor_scores(fd.templates, fd.subjects);
    return s;
}

// Matching scores of the originals themselves (the no-attack baseline rows).
template <class T = float>
ScoreSet build_original_scores(const ImageManifest& originals,
                               const ExtractorHandle<T>& extractor, const EvalFold& fold) {
    detail::FoldData<T> fd = detail::load_fold(originals, extractor, fold);
    const std::size_t n = fd.templates.dim(0), d = fd.templates.dim(1);
    ScoreSet s;
    s.fold_id = fold.id;
    s.attack_kind = "original";
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double sc = cosine_raw(fd.templates.data() + i * d, fd.templates.data() + j * d, d);
            if (fd.subjects[i] == fd.subjects[j])
                s.genuine.push_back(sc);
            else
                s.impostor.push_back(sc);
        }
    return s;
}

inline VerificationResult tar_at_far(const ScoreSet& scores,
                                     const std::vector<double>& far_targets) {
    if (scores.genuine.empty() || scores.impostor.empty())
        throw ValidationError("tar_at_far: genuine and impostor lists must be non-empty");
    for (double v : scores.genuine)
        if (!(v >= -1.0000001 && v <= 1.0000001))
            throw ValidationError("tar_at_far: genuine score outside [-1,1]");
    for (double v : scores.impostor)
        if (!(v >= -1.0000001 && v <= 1.0000001))
            throw ValidationError("tar_at_far: impostor score outside [-1,1]");
    for (double f : far_targets)
        if (!(f > 0 && f < 1)) throw ValidationError("tar_at_far: FAR targets must be in (0,1)");

    std::vector<double> imp = scores.impostor;
    std::sort(imp.begin(), imp.end());
    const double n = double(imp.size());
    std::vector<double> gen = scores.genuine;
    std::sort(gen.begin(), gen.end());

    auto far_of = [&](double t) {
        // fraction of impostor scores >= t
        auto it = std::lower_bound(imp.begin(), imp.end(), t);
        return double(imp.end() - it) / n;
    };
    auto tar_of = [&](double t) {
        auto it = std::lower_bound(gen.begin(), gen.end(), t);
        return 100.0 * double(gen.end() - it) / double(gen.size());
    };

    VerificationResult res;
    res.fold_id = scores.fold_id;
    for (double target : far_targets) {
        double threshold = 0;
        bool found = false;
        // candidates ascend; the first one satisfying the budget is the
        // smallest observed threshold
        for (std::size_t i = 0; i < imp.size(); ++i) {
            if (i > 0 && imp[i] == imp[i - 1]) continue;
            if (far_of(imp[i]) <= target) {
                threshold = imp[i];
                found = true;
                break;
            }
        }
        if (!found)
            throw InsufficientImpostorsError(
                "no impostor-score threshold reaches FAR <= " + std::to_string(target) +
                " with " + std::to_string(imp.size()) + " impostor scores");
        res.rows.push_back({target, threshold, tar_of(threshold)});
    }
    for (std::size_t i = 0; i < imp.size(); ++i) {
        if (i > 0 && imp[i] == imp[i - 1]) continue;
        res.roc.push_back({far_of(imp[i]), tar_of(imp[i])});
    }
    std::reverse(res.roc.begin(), res.roc.end());  // ascending FAR
    return res;
}

inline std::vector<AggregateRow> aggregate_folds(const std::vector<VerificationResult>& folds) {
    if (folds.size() < 2) throw ValidationError("aggregate_folds: need at least 2 folds");
    const std::size_t n_rows = folds[0].rows.size();
    for (auto& f : folds)
        if (f.rows.size() != n_rows)
            throw ValidationError("aggregate_folds: folds disagree on FAR targets");
    std::vector<AggregateRow> out;
    for (std::size_t r = 0; r < n_rows; ++r) {
        std::vector<double> tars, ths;
        for (auto& f : folds) {
            if (f.rows[r].far != folds[0].rows[r].far)
                throw ValidationError("aggregate_folds: folds disagree on FAR targets");
            tars.push_back(f.rows[r].tar);
            ths.push_back(f.rows[r].threshold);
        }
        AggregateRow a;
        a.far = folds[0].rows[r].far;
        a.mu = mean_of(tars);
        a.sigma = stddev_of(tars);
        a.reported = a.mu - a.sigma;
        a.mean_threshold = mean_of(ths);
        out.push_back(a);
    }
    return out;
}

struct IdentificationResult {
    double rank1_percent = 0;
    std::vector<std::string> best_match;  // per probe, the chosen gallery subject
    std::vector<bool> tie_broken;         // true where the argmax was a tie
};

// Closed-set rank-1: every probe goes to the gallery template with maximum
// cosine similarity; exact ties go to the lowest gallery index.
template <class T = float>
IdentificationResult rank1_identification(const ImageManifest& gallery,
                                          const ExtractorHandle<T>& extractor,
                                          const Tensor<T>& probe_images,
                                          const std::vector<std::string>& probe_subjects) {
    if (gallery.entries.empty()) throw ValidationError("rank1: empty gallery");
    if (probe_images.rank() != 4 || probe_images.dim(0) == 0)
        throw ValidationError("rank1: empty probe set");
    if (probe_images.dim(0) != probe_subjects.size())
        throw ValidationError("rank1: probe labels do not match probe count");

    const int s = extractor.info().input_size;
    Tensor<T> gal_images({gallery.entries.size(), 3, std::size_t(s), std::size_t(s)});
    std::size_t per = 3 * std::size_t(s) * s;
    for (std::size_t i = 0; i < gallery.entries.size(); ++i) {
        FaceImage<T> f = load_face<T>(gallery.entries[i], s);
        std::copy_n(f.pixels.data(), per, gal_images.data() + i * per);
    }
    Tensor<T> gal_t = extractor.extract_batch(gal_images);
    Tensor<T> probe_t = extractor.extract_batch(probe_images);
    const std::size_t d = gal_t.dim(1);

    IdentificationResult res;
    std::size_t correct = 0;
    for (std::size_t p = 0; p < probe_t.dim(0); ++p) {
        double best = -2;
        std::size_t best_i = 0;
        bool tie = false;
        for (std::size_t g = 0; g < gal_t.dim(0); ++g) {
            double sc = cosine_raw(probe_t.data() + p * d, gal_t.data() + g * d, d);
            if (sc > best) {
                best = sc;
                best_i = g;
                tie = false;
            } else if (sc == best) {
                tie = true;
            }
        }
        res.best_match.push_back(gallery.entries[best_i].subject_id);
        res.tie_broken.push_back(tie);
        if (gallery.entries[best_i].subject_id == probe_subjects[p]) ++correct;
    }
    res.rank1_percent = 100.0 * double(correct) / double(probe_t.dim(0));
    return res;
}

struct AttackReport {
    std::string model;
    std::string dataset;
    std::string attack;
    std::vector<AggregateRow> rows;
    std::vector<VerificationResult> folds;  // optional, for ROC plotting
};

namespace detail {

inline std::string far_key(double far) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", far);
    return buf;
}

inline std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace detail

// Emits results.json, report.md, report.csv, and roc.svg into out_dir.
// Rows are ordered by (model, dataset, attack); output is a pure function of
// the inputs.
inline void render_report(std::vector<AttackReport> reports, const std::string& out_dir) {
    if (reports.empty()) throw ValidationError("render_report: no results");
    std::sort(reports.begin(), reports.end(), [](const AttackReport& a, const AttackReport& b) {
        return std::tie(a.model, a.dataset, a.attack) < std::tie(b.model, b.dataset, b.attack);
    });
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    nlohmann::json j = nlohmann::json::array();
    for (auto& r : reports) {
        nlohmann::json jr;
        jr["model"] = r.model;
        jr["dataset"] = r.dataset;
        jr["attack"] = r.attack;
        jr["threshold_rule"] = "accept when score >= threshold; empirical impostor quantile";
        jr["sigma_convention"] = "population";
        nlohmann::json far = nlohmann::json::object();
        for (auto& row : r.rows) {
            nlohmann::json cell;
            cell["mu"] = row.mu;
            cell["sigma"] = row.sigma;
            cell["reported"] = row.reported;
            cell["threshold"] = row.mean_threshold;
            far[detail::far_key(row.far)] = cell;
        }
        jr["far"] = far;
        j.push_back(jr);
    }
    std::ofstream jf((fs::path(out_dir) / "results.json").string());
    jf << j.dump(2) << "\n";

    std::ofstream md((fs::path(out_dir) / "report.md").string());
    md << "# Attack evaluation\n\n";
    md << "TAR reported as mean - population stddev over folds, percent. Accept rule: "
          "score >= threshold.\n\n";
    md << "| model | dataset | attack |";
    if (!reports[0].rows.empty())
        for (auto& row : reports[0].rows) md << " TAR@FAR " << detail::far_key(row.far) << " |";
    md << "\n|---|---|---|";
    if (!reports[0].rows.empty())
        for (std::size_t i = 0; i < reports[0].rows.size(); ++i) md << "---|";
    md << "\n";
    for (auto& r : reports) {
        md << "| " << r.model << " | " << r.dataset << " | " << r.attack << " |";
        for (auto& row : r.rows)
            md << " " << detail::fmt2(row.reported) << " (mu " << detail::fmt2(row.mu)
               << ", sigma " << detail::fmt2(row.sigma) << ") |";
        md << "\n";
    }

    std::ofstream csv((fs::path(out_dir) / "report.csv").string());
    csv << "model,dataset,attack,far,mu,sigma,reported,threshold\n";
    for (auto& r : reports)
        for (auto& row : r.rows)
            csv << r.model << "," << r.dataset << "," << r.attack << "," << detail::far_key(row.far)
                << "," << detail::fmt4(row.mu) << "," << detail::fmt4(row.sigma) << ","
                << detail::fmt4(row.reported) << "," << detail::fmt4(row.mean_threshold) << "\n";

    LineChart chart;
    chart.title = "ROC";
    chart.x_label = "FAR";
    chart.y_label = "TAR (%)";
    chart.x_min = 1e-4;
    chart.x_max = 1.0;
    chart.y_min = 0;
    chart.y_max = 100;
    chart.log_x = true;
    static const char* palette[] = {"#c0392b", "#2980b9", "#27ae60", "#8e44ad",
                                    "#d35400", "#16a085", "#2c3e50", "#7f8c8d"};
    int ci = 0;
    for (auto& r : reports) {
        if (r.folds.empty()) continue;
        LineChart::Series s;
        s.name = r.model + "/" + r.attack;
        s.color = palette[ci++ % 8];
        std::map<double, std::pair<double, int>> mean_tar;
        for (auto& f : r.folds)
            for (auto& pt : f.roc) {
                auto& acc = mean_tar[pt.first];
                acc.first += pt.second;
                acc.second += 1;
            }
        for (auto& [far, acc] : mean_tar)
            if (far >= chart.x_min)
                s.pts.push_back({far, acc.first / acc.second});
        chart.series.push_back(std::move(s));
    }
    chart.save((fs::path(out_dir) / "roc.svg").string());
}

}

#endif
