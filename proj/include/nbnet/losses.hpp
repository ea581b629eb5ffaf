#ifndef NBNET_LOSSES_HPP
#define NBNET_LOSSES_HPP

#include <cmath>
#include <memory>
#include <string>
#include <utility>

#include "nbnet/errors.hpp"
#include "nbnet/extractor.hpp"
#include "nbnet/tensor.hpp"

namespace nbnet {

struct LossConfig {
    std::string kind = "pixel";  // pixel | perceptual
    double k = 1.0;              // Minkowski order
    std::string feature_id;      // perceptual only
    // When true, the per-pair Minkowski sum is averaged over pixel count
    // before the 1/k root, so batch losses stay comparable across
    // resolutions. The standalone pixel_loss op is always the raw sum form.
    bool per_pixel_mean = true;
};

inline void validate_loss_config(const LossConfig& cfg) {
    if (cfg.kind != "pixel" && cfg.kind != "perceptual")
        throw ValidationError("loss kind must be pixel or perceptual, got '" + cfg.kind + "'");
    if (!(cfg.k >= 1.0)) throw ValidationError("minkowski order must be >= 1");
    if (cfg.kind == "perceptual" && cfg.feature_id.empty())
        throw ValidationError("perceptual loss needs a feature extractor id");
}

// (sum_m |x_m - x'_m|^k)^(1/k) over every element.
template <class T>
double pixel_loss(const Tensor<T>& x, const Tensor<T>& xp, double k) {
    if (!(k >= 1.0)) throw ValidationError("minkowski order must be >= 1");
    check_same_shape(x, xp, "pixel_loss");
    double s = 0;
    for (std::size_t i = 0; i < x.numel(); ++i)
        s += std::pow(std::fabs(double(x.v[i]) - double(xp.v[i])), k);
    return std::pow(s, 1.0 / k);
}

// Loss and its gradient w.r.t. x'. mean_normalize divides the inner sum by
// the element count (the batch-averaging convention).
template <class T>
std::pair<double, Tensor<T>> pixel_loss_grad(const Tensor<T>& x, const Tensor<T>& xp, double k,
                                             bool mean_normalize = false) {
    if (!(k >= 1.0)) throw ValidationError("minkowski order must be >= 1");
    check_same_shape(x, xp, "pixel_loss");
    const double m = mean_normalize ? double(x.numel()) : 1.0;
    double s = 0;
    for (std::size_t i = 0; i < x.numel(); ++i)
        s += std::pow(std::fabs(double(x.v[i]) - double(xp.v[i])), k) / m;
    Tensor<T> g(xp.shape);
    double loss = std::pow(s, 1.0 / k);
    if (s > 0) {
        double outer = std::pow(s, 1.0 / k - 1.0);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            double d = double(x.v[i]) - double(xp.v[i]);
            if (d == 0) continue;
            double sign = d > 0 ? 1.0 : -1.0;
            g.v[i] = T(-outer * std::pow(std::fabs(d), k - 1.0) * sign / m);
        }
    }
    return {loss, std::move(g)};
}

/**
 * Fixed feature map F for the perceptual objective. forward/backward give
 * the input gradient pathway; F's own parameters stay frozen, which callers
 * can verify through params_digest before and after training. Axis 0 of the
 * input is a batch axis and samples must not mix.
 */
template <class T>
class PerceptualFeatureMap {
public:
    virtual ~PerceptualFeatureMap() = default;
    virtual const std::string& id() const = 0;
    virtual Tensor<T> features(const Tensor<T>& x) const = 0;
    virtual Tensor<T> forward(const Tensor<T>& x) = 0;
    virtual Tensor<T> backward(const Tensor<T>& dfeatures) = 0;
    virtual std::string params_digest() = 0;
};

// Mid-depth activation of the trained embedding net.
template <class T = float>
class StandInFeatureMap : public PerceptualFeatureMap<T> {
public:
    StandInFeatureMap(StandInNet<T> net, std::string extractor_id)
        : net_(std::move(net)),
          id_(std::move(extractor_id) + ":stage" + std::to_string(net_.feature_stage())) {}

    static StandInFeatureMap load(const std::string& checkpoint_path) {
        CheckpointReader r(checkpoint_path, "NBXT", 1);
        std::string eid = r.text("extractor_id");
        return StandInFeatureMap(StandInNet<T>::load_from(r), eid);
    }

    const std::string& id() const override { return id_; }
    Tensor<T> features(const Tensor<T>& x) const override { return net_.infer_features(x); }
    Tensor<T> forward(const Tensor<T>& x) override { return net_.forward_features(x); }
    Tensor<T> backward(const Tensor<T>& df) override { return net_.backward_features(df); }
    std::string params_digest() override { return net_.weights_digest(); }

private:
    StandInNet<T> net_;
    std::string id_;
};

// F = id; turns the perceptual objective into half a squared L2 pixel loss.
template <class T>
class IdentityFeatureMap : public PerceptualFeatureMap<T> {
public:
    const std::string& id() const override { return id_; }
    Tensor<T> features(const Tensor<T>& x) const override { return x; }
    Tensor<T> forward(const Tensor<T>& x) override { return x; }
    Tensor<T> backward(const Tensor<T>& df) override { return df; }
    std::string params_digest() override { return "identity"; }

private:
    std::string id_ = "identity";
};

// 0.5 * ||F(x) - F(x')||^2
template <class T>
double perceptual_loss(const Tensor<T>& x, const Tensor<T>& xp,
                       const PerceptualFeatureMap<T>& f) {
    check_same_shape(x, xp, "perceptual_loss");
    Tensor<T> fx = f.features(x);
    Tensor<T> fxp = f.features(xp);
    double s = 0;
    for (std::size_t i = 0; i < fx.numel(); ++i) {
        double d = double(fx.v[i]) - double(fxp.v[i]);
        s += d * d;
    }
    return 0.5 * s;
}

template <class T>
std::pair<double, Tensor<T>> perceptual_loss_grad(const Tensor<T>& x, const Tensor<T>& xp,
                                                  PerceptualFeatureMap<T>& f) {
    check_same_shape(x, xp, "perceptual_loss");
    Tensor<T> fx = f.features(x);
    Tensor<T> fxp = f.forward(xp);
    check_same_shape(fx, fxp, "perceptual_loss features");
    Tensor<T> df(fxp.shape);
    double s = 0;
    for (std::size_t i = 0; i < fx.numel(); ++i) {
        double d = double(fxp.v[i]) - double(fx.v[i]);
        s += d * d;
        df.v[i] = T(d);
    }
    return {0.5 * s, f.backward(df)};
}

// Mean of per-pair losses over a batch of (x, x') rows stacked on axis 0.
template <class T>
double batch_loss(const Tensor<T>& x, const Tensor<T>& xp, const LossConfig& cfg,
                  const PerceptualFeatureMap<T>* f = nullptr) {
    validate_loss_config(cfg);
    check_same_shape(x, xp, "batch_loss");
    if (x.rank() < 2 || x.dim(0) == 0) throw ValidationError("batch_loss: empty batch");
    const std::size_t n = x.dim(0);
    if (cfg.kind == "perceptual") {
        if (!f) throw ValidationError("feature extractor unavailable for perceptual loss");
        return perceptual_loss(x, xp, *f) / double(n);
    }
    const std::size_t per = x.numel() / n;
    const double m = cfg.per_pixel_mean ? double(per) : 1.0;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < per; ++j) {
            std::size_t at = i * per + j;
            s += std::pow(std::fabs(double(x.v[at]) - double(xp.v[at])), cfg.k) / m;
        }
        total += std::pow(s, 1.0 / cfg.k);
    }
    return total / double(n);
}

// Batch loss plus gradient w.r.t. x'.
template <class T>
std::pair<double, Tensor<T>> batch_loss_grad(const Tensor<T>& x, const Tensor<T>& xp,
                                             const LossConfig& cfg,
                                             PerceptualFeatureMap<T>* f = nullptr) {
    validate_loss_config(cfg);
    check_same_shape(x, xp, "batch_loss");
    if (x.rank() < 2 || x.dim(0) == 0) throw ValidationError("batch_loss: empty batch");
    const std::size_t n = x.dim(0);
    if (cfg.kind == "perceptual") {
        if (!f) throw ValidationError("feature extractor unavailable for perceptual loss");
        Tensor<T> fx = f->features(x);
        Tensor<T> fxp = f->forward(xp);
        check_same_shape(fx, fxp, "batch_loss features");
        Tensor<T> df(fxp.shape);
        double total = 0;
        for (std::size_t i = 0; i < fx.numel(); ++i) {
            double d = double(fxp.v[i]) - double(fx.v[i]);
            total += 0.5 * d * d;
            df.v[i] = T(d / double(n));
        }
        return {total / double(n), f->backward(df)};
    }
    const std::size_t per = x.numel() / n;
    const double m = cfg.per_pixel_mean ? double(per) : 1.0;
    Tensor<T> g(xp.shape);
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < per; ++j) {
            std::size_t at = i * per + j;
            s += std::pow(std::fabs(double(x.v[at]) - double(xp.v[at])), cfg.k) / m;
        }
        total += std::pow(s, 1.0 / cfg.k);
        if (s <= 0) continue;
        double outer = std::pow(s, 1.0 / cfg.k - 1.0);
        for (std::size_t j = 0; j < per; ++j) {
            std::size_t at = i * per + j;
            double d = double(x.v[at]) - double(xp.v[at]);
            if (d == 0) continue;
            double sign = d > 0 ? 1.0 : -1.0;
            g.v[at] = T(-outer * std::pow(std::fabs(d), cfg.k - 1.0) * sign / (m * double(n)));
        }
    }
    return {total / double(n), std::move(g)};
}

}

#endif
