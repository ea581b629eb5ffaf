#ifndef NBNET_EXTRACTOR_HPP
#define NBNET_EXTRACTOR_HPP

#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbnet/data.hpp"
#include "nbnet/errors.hpp"
#include "nbnet/nn.hpp"
#include "nbnet/rng.hpp"
#include "nbnet/serialize.hpp"
#include "nbnet/sha256.hpp"
#include "nbnet/tensor.hpp"

namespace nbnet {

template <class T = float>
struct Template {
    std::vector<T> vector;
    std::string subject_id;
    std::string sample_id;
    std::string extractor_id;
};

struct ExtractorInfo {
    std::string extractor_id;
    int output_dim = 0;
    int input_size = 0;
    bool unit_norm = false;
};

// Cosine similarity in [-1,1]. Throws on dimension/extractor mismatch and on
// zero vectors; invariant under positive scaling of either argument.
template <class T>
double similarity(const Template<T>& a, const Template<T>& b) {
    if (a.extractor_id != b.extractor_id)
        throw ValidationError("similarity: templates from different extractors ('" +
                              a.extractor_id + "' vs '" + b.extractor_id + "')");
    if (a.vector.size() != b.vector.size())
        throw ValidationError("similarity: dimension mismatch (" +
                              std::to_string(a.vector.size()) + " vs " +
                              std::to_string(b.vector.size()) + ")");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.vector.size(); ++i) {
        dot += double(a.vector[i]) * b.vector[i];
        na += double(a.vector[i]) * a.vector[i];
        nb += double(b.vector[i]) * b.vector[i];
    }
    if (na <= 0 || nb <= 0) throw ValidationError("similarity: zero vector");
    double s = dot / (std::sqrt(na) * std::sqrt(nb));
    return std::min(1.0, std::max(-1.0, s));
}

template <class T>
double cosine_raw(const T* a, const T* b, std::size_t n) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += double(a[i]) * b[i];
        na += double(a[i]) * a[i];
        nb += double(b[i]) * b[i];
    }
    if (na <= 0 || nb <= 0) throw ValidationError("cosine: zero vector");
    return std::min(1.0, std::max(-1.0, dot / (std::sqrt(na) * std::sqrt(nb))));
}

struct ExtractorConfig {
    std::string extractor_id = "stand_in";
    int input_size = 32;
    int output_dim = 128;
    std::vector<int> widths = {16, 32, 64, 64};
    int feature_stage = 2;  // stage whose activation serves as perceptual features
    double margin = 0.2;
    double lr = 1e-3;
    int batches = 400;
    int triplets_per_batch = 32;
    std::uint64_t seed = 1;
};

/**
 * Embedding network behind the trainable extractor: four 3x3 conv stages
 * (first stride 1, the rest stride 2), global average pooling, a linear head,
 * and L2 normalization. Also serves as the feature source for the perceptual
 * objective, which reads an intermediate stage.
 */
template <class T = float>
class StandInNet {
public:
    StandInNet() = default;

    StandInNet(int input_size, int output_dim, std::vector<int> widths, int feature_stage)
        : input_size_(input_size), output_dim_(output_dim), widths_(std::move(widths)),
          feature_stage_(feature_stage) {
        if (widths_.empty()) throw ValidationError("extractor: empty conv widths");
        if (feature_stage_ < 0 || feature_stage_ >= int(widths_.size()))
            throw ValidationError("extractor: feature_stage out of range");
        int in = 3;
        for (std::size_t i = 0; i < widths_.size(); ++i) {
            convs_.emplace_back(in, widths_[i], 3, i == 0 ? 1 : 2, 1);
            relus_.emplace_back();
            in = widths_[i];
        }
        head_ = Dense<T>(in, output_dim_);
    }

    void init(Rng& rng) {
        for (auto& c : convs_) c.init_lecun(rng);
        head_.init_he(rng);
    }

    int input_size() const { return input_size_; }
    int output_dim() const { return output_dim_; }
    int feature_stage() const { return feature_stage_; }
    const std::vector<int>& widths() const { return widths_; }

    // (N,3,S,S) -> unit-norm (N,d), training mode
    Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> h = x;
        for (std::size_t i = 0; i < convs_.size(); ++i) h = relus_[i].forward(convs_[i].forward(h));
        return norm_.forward(head_.forward(pool_.forward(h)));
    }

    Tensor<T> backward(const Tensor<T>& demb) {
        Tensor<T> d = pool_.backward(head_.backward(norm_.backward(demb)));
        for (std::size_t i = convs_.size(); i-- > 0;)
            d = convs_[i].backward(relus_[i].backward(d));
        return d;
    }

    Tensor<T> infer(const Tensor<T>& x) const {
        Tensor<T> h = x;
        for (std::size_t i = 0; i < convs_.size(); ++i) h = relus_[i].infer(convs_[i].infer(h));
        return norm_.infer(head_.infer(pool_.infer(h)));
    }

    // Runs stages 0..feature_stage only; caches for backward_features.
    Tensor<T> forward_features(const Tensor<T>& x) {
        Tensor<T> h = x;
        for (int i = 0; i <= feature_stage_; ++i) h = relus_[i].forward(convs_[i].forward(h));
        return h;
    }

    Tensor<T> backward_features(const Tensor<T>& dfeat) {
        Tensor<T> d = dfeat;
        for (int i = feature_stage_; i >= 0; --i) d = convs_[i].backward(relus_[i].backward(d));
        return d;
    }

    Tensor<T> infer_features(const Tensor<T>& x) const {
        Tensor<T> h = x;
        for (int i = 0; i <= feature_stage_; ++i) h = relus_[i].infer(convs_[i].infer(h));
        return h;
    }

    ParamList<T> params() {
        ParamList<T> out;
        for (std::size_t i = 0; i < convs_.size(); ++i)
            convs_[i].collect(out, "conv" + std::to_string(i));
        head_.collect(out, "head");
        return out;
    }

    void save_into(CheckpointWriter& w) {
        w.add_text("input_size", std::to_string(input_size_));
        w.add_text("output_dim", std::to_string(output_dim_));
        std::string ws;
        for (std::size_t i = 0; i < widths_.size(); ++i)
            ws += (i ? "," : "") + std::to_string(widths_[i]);
        w.add_text("widths", ws);
        w.add_text("feature_stage", std::to_string(feature_stage_));
        for (auto& p : params()) w.add_tensor(p.name, *p.value);
    }

    static StandInNet load_from(CheckpointReader& r) {
        std::vector<int> widths;
        std::string ws = r.text("widths");
        std::size_t pos = 0;
        while (pos < ws.size()) {
            std::size_t comma = ws.find(',', pos);
            if (comma == std::string::npos) comma = ws.size();
            widths.push_back(std::stoi(ws.substr(pos, comma - pos)));
            pos = comma + 1;
        }
        StandInNet net(std::stoi(r.text("input_size")), std::stoi(r.text("output_dim")), widths,
                       std::stoi(r.text("feature_stage")));
        for (auto& p : net.params()) {
            Tensor<T> t = r.template tensor<T>(p.name);
            check_same_shape(t, *p.value, "extractor checkpoint " + p.name);
            *p.value = std::move(t);
        }
        return net;
    }

    std::string weights_digest() {
        Sha256 h;
        for (auto& p : params())
            h.update(p.value->data(), p.value->numel() * sizeof(T));
        return h.hex_digest();
    }

private:
    int input_size_ = 0, output_dim_ = 0;
    std::vector<int> widths_;
    int feature_stage_ = 0;
    std::vector<Conv2d<T>> convs_;
    std::vector<ReLU<T>> relus_;
    GlobalAvgPool<T> pool_;
    Dense<T> head_;
    L2Normalize<T> norm_;
};

/**
 * Black-box template extractor. Callers get extract/similarity plus metadata;
 * no gradients and no parameter access. Backed either by a trained StandInNet
 * checkpoint or by a store of precomputed embeddings keyed by
 * (subject_id, sample_id).
 */
template <class T = float>
class ExtractorHandle {
public:
    ExtractorHandle() = default;

    static ExtractorHandle load(const std::string& checkpoint_path) {
        CheckpointReader r(checkpoint_path, "NBXT", 1);
        ExtractorHandle h;
        h.net_ = std::make_shared<StandInNet<T>>(StandInNet<T>::load_from(r));
        h.info_.extractor_id = r.text("extractor_id");
        h.info_.output_dim = h.net_->output_dim();
        h.info_.input_size = h.net_->input_size();
        h.info_.unit_norm = true;
        h.digest_ = h.net_->weights_digest();
        return h;
    }

    // JSON Lines of {subject_id, sample_id, vector}. Such a handle can only
    // look up faces it has rows for; it cannot embed fresh pixels.
    static ExtractorHandle from_embeddings(const std::string& jsonl_path,
                                           const std::string& extractor_id, int input_size) {
        std::ifstream f(jsonl_path);
        if (!f) throw ValidationError("embedding file not found: " + jsonl_path);
        ExtractorHandle h;
        h.store_ = std::make_shared<std::map<std::string, std::vector<T>>>();
        std::string line;
        long line_no = 0;
        int dim = -1;
        bool all_unit = true;
        while (std::getline(f, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(std::string("embedding file: ") + e.what(), line_no);
            }
            if (!j.contains("subject_id") || !j.contains("sample_id") || !j.contains("vector"))
                throw ParseError("embedding file: need subject_id, sample_id, vector", line_no);
            std::vector<T> v;
            for (auto& x : j["vector"]) v.push_back(T(x.get<double>()));
            if (v.size() < 2) throw ParseError("embedding file: vector dimension < 2", line_no);
            if (dim < 0) dim = int(v.size());
            if (int(v.size()) != dim)
                throw ParseError("embedding file: inconsistent dimension", line_no);
            double n2 = 0;
            for (T x : v) n2 += double(x) * x;
            if (std::fabs(std::sqrt(n2) - 1.0) > 1e-4) all_unit = false;
            std::string key = j["subject_id"].get<std::string>() + "\x1f" +
                              j["sample_id"].get<std::string>();
            if (!h.store_->emplace(key, std::move(v)).second)
                throw ParseError("embedding file: duplicate (subject_id, sample_id)", line_no);
        }
        if (h.store_->empty()) throw ParseError("embedding file: no rows", 1);
        h.info_.extractor_id = extractor_id;
        h.info_.output_dim = dim;
        h.info_.input_size = input_size;
        h.info_.unit_norm = all_unit;
        h.digest_ = sha256_file(jsonl_path);
        return h;
    }

    bool initialized() const { return net_ != nullptr || store_ != nullptr; }
    const ExtractorInfo& info() const { return info_; }
    // Metadata for the frozen-parameters check: digest over the weight bytes.
    const std::string& weights_digest() const { return digest_; }

    Template<T> extract(const FaceImage<T>& image) const {
        require_init();
        check_resolution(image.pixels.shape, 0);
        Template<T> t;
        t.subject_id = image.subject_id;
        t.sample_id = image.sample_id;
        t.extractor_id = info_.extractor_id;
        if (store_) {
            auto it = store_->find(image.subject_id + "\x1f" + image.sample_id);
            if (it == store_->end())
                throw ValidationError("no embedding recorded for (" + image.subject_id + ", " +
                                      image.sample_id + ")");
            t.vector = it->second;
            return t;
        }
        Tensor<T> x = image.pixels.reshaped({1, 3, std::size_t(info_.input_size),
                                             std::size_t(info_.input_size)});
        Tensor<T> e = net_->infer(x);
        t.vector.assign(e.data(), e.data() + e.numel());
        return t;
    }

    // (N,3,S,S) -> (N,d). Unavailable for embedding-store handles.
    Tensor<T> extract_batch(const Tensor<T>& images) const {
        require_init();
        if (store_)
            throw ValidationError("embedding-store extractor cannot embed new images");
        check_resolution(images.shape, 1);
        return net_->infer(images);
    }

private:
    void require_init() const {
        if (!initialized()) throw ValidationError("extractor not initialized");
    }

    void check_resolution(const Shape& s, std::size_t off) const {
        if (s.size() != 3 + off || s[off] != 3 || s[off + 1] != std::size_t(info_.input_size) ||
            s[off + 2] != std::size_t(info_.input_size))
            throw ShapeError("extractor expects 3x" + std::to_string(info_.input_size) + "x" +
                             std::to_string(info_.input_size) + " input, got " + shape_str(s));
    }

    std::shared_ptr<StandInNet<T>> net_;
    std::shared_ptr<std::map<std::string, std::vector<T>>> store_;
    ExtractorInfo info_;
    std::string digest_;
};

namespace detail {

template <class T>
Tensor<T> stack_faces(const std::vector<FaceImage<T>>& faces, const std::vector<int>& idx) {
    std::size_t s = faces[0].pixels.dim(1);
    Tensor<T> x({idx.size(), 3, s, s});
    std::size_t per = 3 * s * s;
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(faces[idx[i]].pixels.data(), per, x.data() + i * per);
    return x;
}

}  // namespace detail

// Trains the embedding net with a cosine triplet objective
// max(0, margin - sim(a,p) + sim(a,n)) and writes checkpoint_path. Streams
// one JSON line per batch into log_path when given.
template <class T = float>
ExtractorHandle<T> train_stand_in_extractor(const ImageManifest& train_set,
                                            const ExtractorConfig& cfg,
                                            const std::string& checkpoint_path,
                                            const std::string& log_path = "") {
    std::vector<FaceImage<T>> faces;
    faces.reserve(train_set.entries.size());
    for (auto& e : train_set.entries) faces.push_back(load_face<T>(e, cfg.input_size));

    std::map<std::string, std::vector<int>> by_subject;
    for (std::size_t i = 0; i < faces.size(); ++i)
        by_subject[faces[i].subject_id].push_back(int(i));
    std::vector<const std::vector<int>*> anchor_groups;
    for (auto& [sid, idx] : by_subject)
        if (idx.size() >= 2) anchor_groups.push_back(&idx);
    if (anchor_groups.size() < 2)
        throw ValidationError("insufficient identities: need at least 2 subjects with 2+ "
                              "samples, found " + std::to_string(anchor_groups.size()));

    StandInNet<T> net(cfg.input_size, cfg.output_dim, cfg.widths, cfg.feature_stage);
    Rng rng(mix_seed(cfg.seed, 0x0e17a5ull));
    net.init(rng);
    auto params = net.params();
    Adam<T> opt(0.9, 0.999);
    opt.attach(params);

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw ValidationError("cannot write training log: " + log_path);
    }

    const int tb = cfg.triplets_per_batch;
    for (int batch = 0; batch < cfg.batches; ++batch) {
        std::vector<int> pick;
        pick.reserve(3 * tb);
        for (int t = 0; t < tb; ++t) {
            const auto& grp = *anchor_groups[rng.index(anchor_groups.size())];
            std::size_t ai = rng.index(grp.size());
            std::size_t pi = rng.index(grp.size() - 1);
            if (pi >= ai) ++pi;
            int a = grp[ai], p = grp[pi];
            int n = a;
            while (faces[n].subject_id == faces[a].subject_id)
                n = int(rng.index(faces.size()));
            pick.push_back(a);
            pick.push_back(p);
            pick.push_back(n);
        }
        Tensor<T> x = detail::stack_faces(faces, pick);
        Tensor<T> emb = net.forward(x);
        const std::size_t d = emb.dim(1);

        Tensor<T> demb(emb.shape, T(0));
        double loss = 0;
        int active = 0;
        for (int t = 0; t < tb; ++t) {
            const T* ea = emb.data() + std::size_t(3 * t) * d;
            const T* ep = ea + d;
            const T* en = ep + d;
            double sap = 0, san = 0;
            for (std::size_t i = 0; i < d; ++i) {
                sap += double(ea[i]) * ep[i];
                san += double(ea[i]) * en[i];
            }
            double l = cfg.margin - sap + san;
            if (l <= 0) continue;
            loss += l;
            ++active;
            T* ga = demb.data() + std::size_t(3 * t) * d;
            T* gp = ga + d;
            T* gn = gp + d;
            for (std::size_t i = 0; i < d; ++i) {
                ga[i] += T((double(en[i]) - ep[i]) / tb);
                gp[i] += T(-double(ea[i]) / tb);
                gn[i] += T(double(ea[i]) / tb);
            }
        }
        loss /= tb;
        if (!std::isfinite(loss))
            throw NumericError("extractor training diverged at batch " + std::to_string(batch) +
                               ": loss is not finite");
        zero_grads(params);
        net.backward(demb);
        opt.step(params, cfg.lr);
        if (log)
            log << "{\"batch\":" << batch << ",\"loss\":" << loss
                << ",\"active\":" << active << "}\n";
    }

    CheckpointWriter w(checkpoint_path, "NBXT", 1);
    w.add_text("extractor_id", cfg.extractor_id);
    w.add_text("objective", "cosine-triplet margin=" + std::to_string(cfg.margin));
    net.save_into(w);
    w.finish();
    return ExtractorHandle<T>::load(checkpoint_path);
}

// Loads the embedding net itself (not the black-box wrapper); the perceptual
// objective needs activations and input gradients from it.
template <class T = float>
StandInNet<T> load_stand_in_net(const std::string& checkpoint_path) {
    CheckpointReader r(checkpoint_path, "NBXT", 1);
    return StandInNet<T>::load_from(r);
}

}

#endif
