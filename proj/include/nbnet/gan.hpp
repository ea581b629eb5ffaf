#ifndef NBNET_GAN_HPP
#define NBNET_GAN_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "nbnet/data.hpp"
#include "nbnet/errors.hpp"
#include "nbnet/nn.hpp"
#include "nbnet/rng.hpp"
#include "nbnet/serialize.hpp"
#include "nbnet/tensor.hpp"

namespace nbnet {

/**
 * DCGAN-shaped face generator with three changes: SeLU activations instead
 * of batch-norm + ReLU, soft labels on both sides of the discriminator, and
 * a generator learning rate above the discriminator's. The discriminator
 * sees two batches (one real, one generated) per generator batch.
 */
struct GanConfig {
    int z_dim = 100;
    double g_lr = 2e-4;
    double d_lr = 5e-5;
    double real_lo = 0.7, real_hi = 1.2;
    double fake_lo = 0.0, fake_hi = 0.3;
    int image_size = 160;
    std::vector<int> gen_channels = {512, 256, 128, 64, 32, 16};
    std::vector<int> disc_channels = {16, 32, 64, 128, 256};
    int batch_size = 64;
    int iterations = 2000;
    int checkpoint_every = 1000;
    std::uint64_t seed = 1;
};

// Shrunk for single-core runs: 32x32 images, narrow stacks.
inline GanConfig desk_gan_config(int image_size = 32) {
    GanConfig cfg;
    cfg.image_size = image_size;
    cfg.gen_channels = {32, 16, 8, 4};
    cfg.disc_channels = {4, 8, 16};
    while (image_size > 32) {
        cfg.gen_channels.push_back(std::max(4, cfg.gen_channels.back() / 2));
        cfg.disc_channels.insert(cfg.disc_channels.begin(),
                                 std::max(4, cfg.disc_channels.front() / 2));
        image_size /= 2;
    }
    return cfg;
}

inline void validate_gan_config(const GanConfig& cfg) {
    if (cfg.z_dim < 1) throw ValidationError("gan: z_dim must be positive");
    if (!(cfg.g_lr > cfg.d_lr))
        throw ValidationError("gan: generator learning rate must exceed discriminator's");
    if (cfg.real_lo > cfg.real_hi || cfg.fake_lo > cfg.fake_hi)
        throw ValidationError("gan: label range bounds out of order");
    if (!(cfg.real_lo > cfg.fake_hi || cfg.fake_lo > cfg.real_hi))
        throw ValidationError("gan: real and fake label ranges overlap");
    if (cfg.gen_channels.empty() || cfg.disc_channels.empty())
        throw ValidationError("gan: channel stacks must be non-empty");
    int first = cfg.image_size >> (int(cfg.gen_channels.size()) - 1);
    if (first < 2 || (first << (int(cfg.gen_channels.size()) - 1)) != cfg.image_size)
        throw ValidationError("gan: image_size incompatible with generator depth");
    int tail = cfg.image_size >> int(cfg.disc_channels.size());
    if (tail < 2 || (tail << int(cfg.disc_channels.size())) != cfg.image_size)
        throw ValidationError("gan: image_size incompatible with discriminator depth");
    if (cfg.batch_size < 1) throw ValidationError("gan: batch_size must be positive");
    if (cfg.iterations < 0) throw ValidationError("gan: iterations must be non-negative");
    if (cfg.checkpoint_every < 1) throw ValidationError("gan: checkpoint_every must be positive");
}

// (n, z_dim, 1, 1) of i.i.d. uniform [-1,1] draws.
template <class T = float>
Tensor<T> sample_z(std::size_t n, int z_dim, std::uint64_t seed) {
    if (n < 1) throw ValidationError("sample_z: need n >= 1");
    if (z_dim < 1) throw ValidationError("sample_z: need z_dim >= 1");
    Rng rng(mix_seed(seed, 0x5a17ull));
    Tensor<T> z({n, std::size_t(z_dim), 1, 1});
    for (auto& v : z.v) v = T(rng.uniform(-1.0, 1.0));
    return z;
}

enum class LabelKind { real, fake };

template <class T = float>
std::vector<T> soft_labels(std::size_t n, LabelKind kind, const GanConfig& cfg,
                           std::uint64_t seed) {
    if (n < 1) throw ValidationError("soft_labels: need n >= 1");
    Rng rng(mix_seed(seed, kind == LabelKind::real ? 0x4ea1ull : 0xfa4eull));
    double lo = kind == LabelKind::real ? cfg.real_lo : cfg.fake_lo;
    double hi = kind == LabelKind::real ? cfg.real_hi : cfg.fake_hi;
    std::vector<T> out(n);
    for (auto& v : out) v = T(rng.uniform(lo, hi));
    return out;
}

namespace detail {

// max(l,0) - l t + log(1 + exp(-|l|)), mean over the batch; also d/dlogit.
template <class T>
double bce_with_logits(const T* logits, const T* targets, std::size_t n, T* dlogits) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double l = logits[i], t = targets[i];
        total += std::max(l, 0.0) - l * t + std::log1p(std::exp(-std::fabs(l)));
        if (dlogits) {
            double sig = 1.0 / (1.0 + std::exp(-l));
            dlogits[i] = T((sig - t) / double(n));
        }
    }
    return total / double(n);
}

}  // namespace detail

template <class T = float>
class Generator {
public:
    Generator() = default;

    Generator(int z_dim, int image_size, const std::vector<int>& channels)
        : z_dim_(z_dim), image_size_(image_size) {
        int first = image_size >> (int(channels.size()) - 1);
        int in = z_dim;
        for (std::size_t i = 0; i < channels.size(); ++i) {
            if (i == 0)
                deconvs_.emplace_back(in, channels[i], first, 2, 0);
            else
                deconvs_.emplace_back(in, channels[i], 4, 2, 1);
            acts_.emplace_back();
            in = channels[i];
        }
        final_ = Conv2d<T>(in, 3, 3, 1, 1);
    }

    void init(Rng& rng) {
        for (auto& d : deconvs_) d.init_lecun(rng);
        final_.init_lecun(rng);
    }

    int z_dim() const { return z_dim_; }
    int image_size() const { return image_size_; }

    Tensor<T> forward(const Tensor<T>& z) {
        check_z(z);
        Tensor<T> h = z;
        for (std::size_t i = 0; i < deconvs_.size(); ++i)
            h = acts_[i].forward(deconvs_[i].forward(h));
        return tanh_.forward(final_.forward(h));
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> d = final_.backward(tanh_.backward(dy));
        for (std::size_t i = deconvs_.size(); i-- > 0;)
            d = deconvs_[i].backward(acts_[i].backward(d));
        return d;
    }

    Tensor<T> infer(const Tensor<T>& z) const {
        check_z(z);
        Tensor<T> h = z;
        for (std::size_t i = 0; i < deconvs_.size(); ++i)
            h = acts_[i].infer(deconvs_[i].infer(h));
        return tanh_.infer(final_.infer(h));
    }

    ParamList<T> params() {
        ParamList<T> out;
        for (std::size_t i = 0; i < deconvs_.size(); ++i)
            deconvs_[i].collect(out, "g.deconv" + std::to_string(i));
        final_.collect(out, "g.final");
        return out;
    }

    std::vector<int> channels() const {
        std::vector<int> c;
        for (auto& d : deconvs_) c.push_back(d.weight().dim(1));
        return c;
    }

private:
    void check_z(const Tensor<T>& z) const {
        if (z.rank() != 4 || z.dim(1) != std::size_t(z_dim_) || z.dim(2) != 1 || z.dim(3) != 1)
            throw ShapeError("generator expects (N," + std::to_string(z_dim_) +
                             ",1,1) input, got " + shape_str(z.shape));
    }

    int z_dim_ = 0, image_size_ = 0;
    std::vector<ConvTranspose2d<T>> deconvs_;
    std::vector<SeLU<T>> acts_;
    Conv2d<T> final_;
    Tanh<T> tanh_;
};

template <class T = float>
class Discriminator {
public:
    Discriminator() = default;

    Discriminator(int image_size, const std::vector<int>& channels) {
        int in = 3;
        for (int c : channels) {
            convs_.emplace_back(in, c, 4, 2, 1);
            acts_.emplace_back();
            in = c;
        }
        int tail = image_size >> int(channels.size());
        final_ = Conv2d<T>(in, 1, tail, 1, 0);
    }

    void init(Rng& rng) {
        for (auto& c : convs_) c.init_lecun(rng);
        final_.init_lecun(rng);
    }

    // (N,3,S,S) -> (N) logits
    Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> h = x;
        for (std::size_t i = 0; i < convs_.size(); ++i) h = acts_[i].forward(convs_[i].forward(h));
        Tensor<T> l = final_.forward(h);
        return l.reshaped({l.dim(0)});
    }

    Tensor<T> backward(const Tensor<T>& dlogit) {
        Tensor<T> dl = final_.backward(dlogit.reshaped({dlogit.dim(0), 1, 1, 1}));
        for (std::size_t i = convs_.size(); i-- > 0;) dl = convs_[i].backward(acts_[i].backward(dl));
        return dl;
    }

    ParamList<T> params() {
        ParamList<T> out;
        for (std::size_t i = 0; i < convs_.size(); ++i)
            convs_[i].collect(out, "d.conv" + std::to_string(i));
        final_.collect(out, "d.final");
        return out;
    }

private:
    std::vector<Conv2d<T>> convs_;
    std::vector<SeLU<T>> acts_;
    Conv2d<T> final_;
};

// Deterministic batch generation from a frozen generator.
template <class T>
Tensor<T> generate(const Generator<T>& g, const Tensor<T>& z) {
    return g.infer(z);
}

namespace detail {

template <class T>
void save_adam(CheckpointWriter& w, const std::string& prefix, Adam<T>& opt) {
    w.add_text(prefix + ".steps", std::to_string(opt.step_count()));
    for (std::size_t i = 0; i < opt.m().size(); ++i) {
        w.add_tensor(prefix + ".m" + std::to_string(i), opt.m()[i]);
        w.add_tensor(prefix + ".v" + std::to_string(i), opt.v()[i]);
    }
}

template <class T>
void load_adam(CheckpointReader& r, const std::string& prefix, Adam<T>& opt) {
    opt.set_step_count(std::stoll(r.text(prefix + ".steps")));
    for (std::size_t i = 0; i < opt.m().size(); ++i) {
        opt.m()[i] = r.template tensor<T>(prefix + ".m" + std::to_string(i));
        opt.v()[i] = r.template tensor<T>(prefix + ".v" + std::to_string(i));
    }
}

}  // namespace detail

template <class T = float>
void save_gan_checkpoint(const std::string& path, const GanConfig& cfg, long long iteration,
                         Generator<T>& gen, Discriminator<T>& disc, Adam<T>& g_opt,
                         Adam<T>& d_opt, const std::string& rng_state) {
    std::string tmp = path + ".tmp";
    {
        CheckpointWriter w(tmp, "NBGN", 1);
        w.add_text("z_dim", std::to_string(cfg.z_dim));
        w.add_text("image_size", std::to_string(cfg.image_size));
        std::string gc, dc;
        for (std::size_t i = 0; i < cfg.gen_channels.size(); ++i)
            gc += (i ? "," : "") + std::to_string(cfg.gen_channels[i]);
        for (std::size_t i = 0; i < cfg.disc_channels.size(); ++i)
            dc += (i ? "," : "") + std::to_string(cfg.disc_channels[i]);
        w.add_text("gen_channels", gc);
        w.add_text("disc_channels", dc);
        w.add_text("iteration", std::to_string(iteration));
        w.add_text("rng_state", rng_state);
        for (auto& p : gen.params()) w.add_tensor(p.name, *p.value);
        for (auto& p : disc.params()) w.add_tensor(p.name, *p.value);
        detail::save_adam(w, "g_opt", g_opt);
        detail::save_adam(w, "d_opt", d_opt);
        w.finish();
    }
    std::filesystem::rename(tmp, path);
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
        std::size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        out.push_back(std::stoi(s.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return out;
}

template <class T = float>
Generator<T> load_generator(const std::string& path) {
    CheckpointReader r(path, "NBGN", 1);
    Generator<T> g(std::stoi(r.text("z_dim")), std::stoi(r.text("image_size")),
                   parse_int_list(r.text("gen_channels")));
    for (auto& p : g.params()) {
        Tensor<T> t = r.template tensor<T>(p.name);
        check_same_shape(t, *p.value, "gan checkpoint " + p.name);
        *p.value = std::move(t);
    }
    return g;
}

/**
 * One training iteration: two discriminator batches (real images against
 * real-range labels, generated images against fake-range labels), then one
 * generator batch driven toward label 1. Losses are logged per iteration as
 * JSON lines; a checkpoint lands every checkpoint_every iterations, and the
 * most recent one survives a divergence abort. Pass resume_from to continue
 * an interrupted run, iteration counter and optimizer moments included.
 */
template <class T = float>
Generator<T> train_gan(const ImageManifest& dataset, const GanConfig& cfg,
                       const std::string& checkpoint_path, const std::string& log_path = "",
                       const std::string& resume_from = "") {
    validate_gan_config(cfg);
    if (dataset.entries.empty()) throw ValidationError("gan: empty dataset");

    std::vector<FaceImage<T>> faces;
    faces.reserve(dataset.entries.size());
    for (auto& e : dataset.entries) faces.push_back(load_face<T>(e, cfg.image_size));

    Generator<T> gen(cfg.z_dim, cfg.image_size, cfg.gen_channels);
    Discriminator<T> disc(cfg.image_size, cfg.disc_channels);
    Rng rng(mix_seed(cfg.seed, 0x6a4ull));
    gen.init(rng);
    disc.init(rng);

    auto g_params = gen.params();
    auto d_params = disc.params();
    Adam<T> g_opt(0.5, 0.999), d_opt(0.5, 0.999);
    g_opt.attach(g_params);
    d_opt.attach(d_params);

    long long start_iter = 0;
    if (!resume_from.empty()) {
        CheckpointReader r(resume_from, "NBGN", 1);
        if (std::stoi(r.text("z_dim")) != cfg.z_dim ||
            std::stoi(r.text("image_size")) != cfg.image_size ||
            parse_int_list(r.text("gen_channels")) != cfg.gen_channels ||
            parse_int_list(r.text("disc_channels")) != cfg.disc_channels)
            throw CheckpointError("gan resume: checkpoint architecture differs from config");
        for (auto& p : g_params) *p.value = r.template tensor<T>(p.name);
        for (auto& p : d_params) *p.value = r.template tensor<T>(p.name);
        detail::load_adam(r, "g_opt", g_opt);
        detail::load_adam(r, "d_opt", d_opt);
        start_iter = std::stoll(r.text("iteration"));
        rng.load_state(r.text("rng_state"));
    }

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path, start_iter > 0 ? std::ios::app : std::ios::out);
        if (!log) throw ValidationError("cannot write gan log: " + log_path);
    }

    const std::size_t bs = std::size_t(cfg.batch_size);
    const std::size_t img = 3 * std::size_t(cfg.image_size) * cfg.image_size;
    for (long long iter = start_iter; iter < cfg.iterations; ++iter) {
        // discriminator, real batch
        Tensor<T> xr({bs, 3, std::size_t(cfg.image_size), std::size_t(cfg.image_size)});
        for (std::size_t i = 0; i < bs; ++i)
            std::copy_n(faces[rng.index(faces.size())].pixels.data(), img, xr.data() + i * img);
        std::vector<T> tr = soft_labels<T>(bs, LabelKind::real, cfg,
                                           mix_seed(cfg.seed, 2 * iter + 1));
        zero_grads(d_params);
        Tensor<T> lr_logit = disc.forward(xr);
        Tensor<T> dl({bs});
        double d_loss_real = detail::bce_with_logits(lr_logit.data(), tr.data(), bs, dl.data());
        disc.backward(dl);
        d_opt.step(d_params, cfg.d_lr);

        // discriminator, generated batch
        Tensor<T> zf = sample_z<T>(bs, cfg.z_dim, mix_seed(cfg.seed, 3 * iter + 2));
        Tensor<T> xf = gen.infer(zf);
        std::vector<T> tf = soft_labels<T>(bs, LabelKind::fake, cfg,
                                           mix_seed(cfg.seed, 2 * iter + 2));
        zero_grads(d_params);
        Tensor<T> lf_logit = disc.forward(xf);
        double d_loss_fake = detail::bce_with_logits(lf_logit.data(), tf.data(), bs, dl.data());
        disc.backward(dl);
        d_opt.step(d_params, cfg.d_lr);

        // generator batch, driven toward 1
        Tensor<T> zg = sample_z<T>(bs, cfg.z_dim, mix_seed(cfg.seed, 3 * iter + 3));
        zero_grads(g_params);
        zero_grads(d_params);
        Tensor<T> xg = gen.forward(zg);
        Tensor<T> lg_logit = disc.forward(xg);
        std::vector<T> ones(bs, T(1));
        double g_loss = detail::bce_with_logits(lg_logit.data(), ones.data(), bs, dl.data());
        Tensor<T> dimg = disc.backward(dl);
        gen.backward(dimg);
        g_opt.step(g_params, cfg.g_lr);

        double d_loss = 0.5 * (d_loss_real + d_loss_fake);
        if (log)
            log << "{\"iter\":" << iter << ",\"g_loss\":" << g_loss << ",\"d_loss\":" << d_loss
                << "}\n" << std::flush;
        if (!std::isfinite(g_loss) || !std::isfinite(d_loss))
            throw NumericError("gan training diverged at iteration " + std::to_string(iter) +
                               " (g=" + std::to_string(g_loss) + " d=" + std::to_string(d_loss) +
                               "); last checkpoint retained");
        if ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.iterations)
            save_gan_checkpoint(checkpoint_path, cfg, iter + 1, gen, disc, g_opt, d_opt,
                                rng.save_state());
    }
    if (start_iter >= cfg.iterations)
        save_gan_checkpoint(checkpoint_path, cfg, start_iter, gen, disc, g_opt, d_opt,
                            rng.save_state());
    return load_generator<T>(checkpoint_path);
}

}

#endif
