#ifndef NBNET_TRAINER_HPP
#define NBNET_TRAINER_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "nbnet/errors.hpp"
#include "nbnet/extractor.hpp"
#include "nbnet/gan.hpp"
#include "nbnet/losses.hpp"
#include "nbnet/nbnet.hpp"
#include "nbnet/rng.hpp"
#include "nbnet/serialize.hpp"

namespace nbnet {

struct TrainConfig {
    int batch_size = 64;
    double beta1 = 0.5, beta2 = 0.999;
    double lr0 = 2e-4;
    double lr_decay = 0.94;
    long long lr_decay_every = 5000;
    long long phase1_batches = 300000;
    long long phase2_batches = 100000;
    long long checkpoint_every = 1000;
    int keep_checkpoints = 3;
    std::uint64_t seed = 1;
    std::string data_source = "generator";  // generator | raw_manifest
};

inline void validate_train_config(const TrainConfig& cfg) {
    if (cfg.batch_size < 1) throw ValidationError("trainer: batch_size must be positive");
    if (cfg.phase1_batches < 0 || cfg.phase2_batches < 0)
        throw ValidationError("trainer: phase batch counts must be non-negative");
    if (cfg.lr_decay_every < 1) throw ValidationError("trainer: lr_decay_every must be positive");
    if (cfg.checkpoint_every < 1)
        throw ValidationError("trainer: checkpoint_every must be positive");
    if (cfg.keep_checkpoints < 1)
        throw ValidationError("trainer: keep_checkpoints must be positive");
    if (!(cfg.lr0 > 0)) throw ValidationError("trainer: lr0 must be positive");
    if (cfg.data_source != "generator" && cfg.data_source != "raw_manifest")
        throw ValidationError("trainer: data_source must be generator or raw_manifest");
}

// Step decay: lr0 * decay^floor(batch / every).
inline double lr_at(long long batch_index, const TrainConfig& cfg) {
    if (batch_index < 0) throw ValidationError("lr_at: batch_index must be >= 0");
    return cfg.lr0 * std::pow(cfg.lr_decay, double(batch_index / cfg.lr_decay_every));
}

/**
 * Supplies (template batch, image batch) pairs. Generator mode draws fresh z
 * each batch, renders images with the frozen generator, and runs them through
 * the black-box extractor. Raw mode walks shuffled epochs over a manifest
 * whose templates are extracted once up front. Both modes derive everything
 * from (seed, batch counter), so a stream resumed at counter c replays the
 * exact remaining sequence.
 */
template <class T = float>
class TrainingStream {
public:
    TrainingStream(const Generator<T>* gen, const ExtractorHandle<T>& extractor, int batch_size,
                   std::uint64_t seed)
        : gen_(gen), ex_(&extractor), bs_(batch_size), seed_(seed) {
        if (!gen_) throw ValidationError("training stream: null generator");
        if (gen_->image_size() != ex_->info().input_size)
            throw ShapeError("training stream: generator renders " +
                             std::to_string(gen_->image_size()) + "px but extractor expects " +
                             std::to_string(ex_->info().input_size) + "px");
    }

    TrainingStream(const ImageManifest& manifest, const ExtractorHandle<T>& extractor,
                   int batch_size, std::uint64_t seed)
        : ex_(&extractor), bs_(batch_size), seed_(seed) {
        if (manifest.entries.empty()) throw ValidationError("training stream: empty manifest");
        const int s = ex_->info().input_size;
        Tensor<T> all({manifest.entries.size(), 3, std::size_t(s), std::size_t(s)});
        std::size_t per = 3 * std::size_t(s) * s;
        for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
            FaceImage<T> f = load_face<T>(manifest.entries[i], s);
            std::copy_n(f.pixels.data(), per, all.data() + i * per);
        }
        images_ = std::move(all);
        templates_ = ex_->extract_batch(images_);
    }

    int batch_size() const { return bs_; }
    int template_dim() const { return ex_->info().output_dim; }
    int image_size() const { return ex_->info().input_size; }
    long long counter() const { return counter_; }
    void seek(long long counter) {
        if (counter < 0) throw ValidationError("training stream: negative counter");
        counter_ = counter;
    }

    // templates (N,d), images (N,3,S,S)
    std::pair<Tensor<T>, Tensor<T>> next() {
        if (gen_) {
            Tensor<T> z = sample_z<T>(std::size_t(bs_), gen_->z_dim(),
                                      mix_seed(seed_, std::uint64_t(counter_)));
            ++counter_;
            Tensor<T> x = gen_->infer(z);
            return {ex_->extract_batch(x), std::move(x)};
        }
        const std::size_t n = images_.dim(0);
        const std::size_t per = images_.numel() / n;
        const std::size_t d = templates_.dim(1);
        Tensor<T> xb({std::size_t(bs_), 3, images_.dim(2), images_.dim(3)});
        Tensor<T> yb({std::size_t(bs_), d});
        for (int j = 0; j < bs_; ++j) {
            unsigned long long g = (unsigned long long)(counter_) * bs_ + j;
            std::size_t idx = epoch_index(g / n, g % n);
            std::copy_n(images_.data() + idx * per, per, xb.data() + std::size_t(j) * per);
            std::copy_n(templates_.data() + idx * d, d, yb.data() + std::size_t(j) * d);
        }
        ++counter_;
        return {std::move(yb), std::move(xb)};
    }

private:
    // Position `off` of epoch e's shuffle; epochs are derived on demand so
    // the stream stays a pure function of (seed, counter).
    std::size_t epoch_index(unsigned long long e, std::size_t off) {
        if (e != cached_epoch_ || perm_.empty()) {
            perm_.resize(images_.dim(0));
            for (std::size_t i = 0; i < perm_.size(); ++i) perm_[i] = i;
            Rng r(mix_seed(seed_, 0xe90c4000ull + e));
            r.shuffle(perm_.begin(), perm_.end());
            cached_epoch_ = e;
        }
        return perm_[off];
    }

    const Generator<T>* gen_ = nullptr;
    const ExtractorHandle<T>* ex_;
    int bs_;
    std::uint64_t seed_;
    long long counter_ = 0;
    Tensor<T> images_, templates_;
    std::vector<std::size_t> perm_;
    unsigned long long cached_epoch_ = ~0ull;
};

struct TrainResult {
    long long batches = 0;
    double final_loss = 0;
    double first_window_mean = 0;
    double last_window_mean = 0;
};

namespace detail {

inline std::string state_name(long long batch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "state_%08lld.ckpt", batch);
    return buf;
}

template <class T>
void save_train_state(const std::string& dir, long long batch, ReconstructionModel<T>& model,
                      Adam<T>& opt, const TrainConfig& cfg, TrainingStream<T>& stream,
                      int keep) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::string model_tmp = (fs::path(dir) / "model.tmp").string();
    model.save(model_tmp);

    std::string path = (fs::path(dir) / state_name(batch)).string();
    std::string tmp = path + ".tmp";
    {
        CheckpointWriter w(tmp, "NBTS", 1);
        w.add_text("batch", std::to_string(batch));
        w.add_text("stream_counter", std::to_string(stream.counter()));
        w.add_text("lr", std::to_string(lr_at(batch, cfg)));
        std::ifstream mf(model_tmp, std::ios::binary);
        std::string blob((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>());
        w.add_text("model_blob", blob);
        detail::save_adam(w, "opt", opt);
        w.finish();
    }
    fs::rename(tmp, path);
    fs::remove(model_tmp);

    // prune old state files, newest `keep` stay
    std::vector<std::string> states;
    for (auto& de : fs::directory_iterator(dir)) {
        std::string n = de.path().filename().string();
        if (n.rfind("state_", 0) == 0 && n.size() > 6 && n.find(".ckpt") != std::string::npos &&
            n.find(".tmp") == std::string::npos)
            states.push_back(de.path().string());
    }
    std::sort(states.begin(), states.end());
    while (int(states.size()) > keep) {
        fs::remove(states.front());
        states.erase(states.begin());
    }
}

template <class T>
ReconstructionModel<T> model_from_blob(const std::string& state_path, const std::string& blob) {
    std::string tmp = state_path + ".model_blob.tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        f.write(blob.data(), std::streamsize(blob.size()));
    }
    ReconstructionModel<T> m = ReconstructionModel<T>::load(tmp);
    std::filesystem::remove(tmp);
    return m;
}

}  // namespace detail

/**
 * Runs n_batches of Adam on the reconstruction model against the stream.
 * Writes one JSON line per batch {batch, loss, lr, wall_ms}, a state
 * checkpoint every checkpoint_every batches (last keep_checkpoints retained),
 * and best.ckpt whenever the mean loss since the previous checkpoint
 * improves. A non-finite loss aborts with the existing checkpoints intact.
 */
template <class T = float>
TrainResult train_nbnet(ReconstructionModel<T>& model, TrainingStream<T>& stream,
                        const LossConfig& loss_cfg, const TrainConfig& cfg, long long n_batches,
                        const std::string& run_dir, PerceptualFeatureMap<T>* fmap = nullptr,
                        const std::string& resume_from = "") {
    validate_train_config(cfg);
    validate_loss_config(loss_cfg);
    if (loss_cfg.kind == "perceptual" && !fmap)
        throw ValidationError("trainer: perceptual loss needs a feature map");
    if (model.spec().input_dim != stream.template_dim())
        throw ShapeError("trainer: model takes " + std::to_string(model.spec().input_dim) +
                         "-D templates but stream yields " +
                         std::to_string(stream.template_dim()) + "-D");
    if (model.output_size() != stream.image_size())
        throw ShapeError("trainer: model renders " + std::to_string(model.output_size()) +
                         "px but stream images are " + std::to_string(stream.image_size()) + "px");

    namespace fs = std::filesystem;
    fs::create_directories(run_dir);
    Adam<T> opt(cfg.beta1, cfg.beta2);

    long long start = 0;
    if (!resume_from.empty()) {
        CheckpointReader r(resume_from, "NBTS", 1);
        model = detail::model_from_blob<T>(resume_from, r.text("model_blob"));
        stream.seek(std::stoll(r.text("stream_counter")));
        start = std::stoll(r.text("batch"));
        auto fresh = model.params();
        opt.attach(fresh);
        detail::load_adam(r, "opt", opt);
    }
    auto params = model.params();
    if (resume_from.empty()) opt.attach(params);

    std::ofstream log((fs::path(run_dir) / "train_log.jsonl").string(),
                      start > 0 ? std::ios::app : std::ios::out);
    if (!log) throw ValidationError("cannot write training log in " + run_dir);

    TrainResult res;
    res.batches = n_batches;
    const long long window = std::max(1ll, std::min(n_batches, 100ll));
    double first_sum = 0, last_acc = 0;
    long long first_n = 0, last_n = 0;
    double ckpt_sum = 0;
    long long ckpt_n = 0;
    double best = std::numeric_limits<double>::infinity();
    std::string best_path = (fs::path(run_dir) / "best.ckpt").string();

    for (long long b = start; b < n_batches; ++b) {
        auto t0 = std::chrono::steady_clock::now();
        auto [y, x] = stream.next();
        Tensor<T> y4 = y.reshaped({y.dim(0), y.dim(1), 1, 1});
        Tensor<T> out = model.forward(y4);
        auto [loss, dout] = batch_loss_grad(x, out, loss_cfg, fmap);
        zero_grads(params);
        model.backward(dout);
        double lr = lr_at(b, cfg);
        opt.step(params, lr);
        auto t1 = std::chrono::steady_clock::now();
        double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        log << "{\"batch\":" << b << ",\"loss\":" << loss << ",\"lr\":" << lr
            << ",\"wall_ms\":" << ms << "}\n";
        if (!std::isfinite(loss))
            throw NumericError("training diverged at batch " + std::to_string(b) +
                               "; last checkpoint retained in " + run_dir);
        if (b - start < window) {
            first_sum += loss;
            ++first_n;
        }
        if (b >= n_batches - window) {
            last_acc += loss;
            ++last_n;
        }
        ckpt_sum += loss;
        ++ckpt_n;
        res.final_loss = loss;
        if ((b + 1) % cfg.checkpoint_every == 0 || b + 1 == n_batches) {
            detail::save_train_state(run_dir, b + 1, model, opt, cfg, stream,
                                     cfg.keep_checkpoints);
            double mean = ckpt_sum / double(ckpt_n);
            if (mean < best) {
                best = mean;
                model.save(best_path);
            }
            ckpt_sum = 0;
            ckpt_n = 0;
            log << std::flush;
        }
    }
    res.first_window_mean = first_n ? first_sum / double(first_n) : 0;
    res.last_window_mean = last_n ? last_acc / double(last_n) : 0;
    return res;
}

/**
 * Pixel-loss phase from fresh Normal(0, 0.02) weights, then a perceptual
 * refinement phase that keeps the parameters and restarts the optimizer
 * moments and lr schedule. The phase boundary is recorded in the log.
 */
template <class T = float>
TrainResult two_phase_train(ReconstructionModel<T>& model, TrainingStream<T>& stream,
                            const TrainConfig& cfg, const std::string& run_dir,
                            PerceptualFeatureMap<T>* fmap, double minkowski_k = 1.0) {
    namespace fs = std::filesystem;
    LossConfig pixel;
    pixel.kind = "pixel";
    pixel.k = minkowski_k;
    TrainResult r1 = train_nbnet(model, stream, pixel, cfg, cfg.phase1_batches,
                                 (fs::path(run_dir) / "phase1").string());
    if (cfg.phase2_batches == 0) return r1;
    if (!fmap) throw ValidationError("two_phase_train: phase 2 needs a feature map");
    {
        std::ofstream log((fs::path(run_dir) / "phase1" / "train_log.jsonl").string(),
                          std::ios::app);
        log << "{\"event\":\"phase2_start\",\"note\":\"optimizer moments and lr schedule "
               "reset\"}\n";
    }
    LossConfig perc;
    perc.kind = "perceptual";
    perc.feature_id = fmap->id();
    return train_nbnet(model, stream, perc, cfg, cfg.phase2_batches,
                       (fs::path(run_dir) / "phase2").string(), fmap);
}

}

#endif
