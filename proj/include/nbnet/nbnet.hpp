#ifndef NBNET_NBNET_HPP
#define NBNET_NBNET_HPP

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbnet/data.hpp"
#include "nbnet/errors.hpp"
#include "nbnet/extractor.hpp"
#include "nbnet/nn.hpp"
#include "nbnet/rng.hpp"
#include "nbnet/serialize.hpp"
#include "nbnet/tensor.hpp"

namespace nbnet {

enum class BlockKind { plain, nb_a, nb_b };
enum class NetKind { dcnn, nbnet_a, nbnet_b };

inline std::string to_string(BlockKind k) {
    switch (k) {
        case BlockKind::plain: return "plain";
        case BlockKind::nb_a: return "nb_a";
        default: return "nb_b";
    }
}

inline BlockKind block_kind_from(const std::string& s) {
    if (s == "plain") return BlockKind::plain;
    if (s == "nb_a") return BlockKind::nb_a;
    if (s == "nb_b") return BlockKind::nb_b;
    throw ValidationError("unknown block kind '" + s + "'");
}

inline std::string to_string(NetKind k) {
    switch (k) {
        case NetKind::dcnn: return "dcnn";
        case NetKind::nbnet_a: return "nbnet_a";
        default: return "nbnet_b";
    }
}

inline NetKind net_kind_from(const std::string& s) {
    if (s == "dcnn") return NetKind::dcnn;
    if (s == "nbnet_a") return NetKind::nbnet_a;
    if (s == "nbnet_b") return NetKind::nbnet_b;
    throw ValidationError("unknown network kind '" + s + "'");
}

struct BlockSpec {
    BlockKind kind = BlockKind::plain;
    int out_channels = 0;  // c' after concatenation
    int dconv_kh = 4, dconv_kw = 4;
    int dconv_stride = 2;
    int dconv_pad = 1;
    int convop_channels = 8;
    int convop_count = 0;  // P
    int convop_kernel = 3;

    int dconv_channels() const {
        return kind == BlockKind::plain ? out_channels : out_channels / 2;
    }
};

struct NetworkSpec {
    int input_dim = 128;
    std::vector<BlockSpec> blocks;
    int final_kernel = 3;  // stride 1, 3 output channels, tanh
    std::string loss_kind = "pixel";
};

inline void validate_spec(const NetworkSpec& spec) {
    if (spec.input_dim < 1) throw ValidationError("network spec: input_dim must be positive");
    if (spec.blocks.empty()) throw ValidationError("network spec: no blocks");
    if (spec.loss_kind != "pixel" && spec.loss_kind != "perceptual")
        throw ValidationError("network spec: loss_kind must be pixel or perceptual");
    if (spec.final_kernel < 1 || spec.final_kernel % 2 == 0)
        throw ValidationError("network spec: final_kernel must be odd and positive");
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
        const BlockSpec& b = spec.blocks[i];
        std::string who = "block " + std::to_string(i + 1);
        if (b.out_channels < 1) throw ValidationError(who + ": out_channels must be positive");
        if (b.dconv_kh < 1 || b.dconv_kw < 1 || b.dconv_stride < 1 || b.dconv_pad < 0)
            throw ValidationError(who + ": bad de-convolution geometry");
        if (b.kind == BlockKind::plain) {
            if (b.convop_count != 0)
                throw ValidationError(who + ": plain blocks take no ConvOPs");
            continue;
        }
        if (b.out_channels % 2 != 0)
            throw ValidationError(who + ": out_channels must be even, got " +
                                  std::to_string(b.out_channels));
        int half = b.out_channels / 2;
        if (b.convop_channels < 1 || half % b.convop_channels != 0)
            throw ValidationError(who + ": half of out_channels (" + std::to_string(half) +
                                  ") is not divisible by convop_channels (" +
                                  std::to_string(b.convop_channels) + ")");
        if (b.convop_count * b.convop_channels != half)
            throw ValidationError(who + ": convop_count x convop_channels must equal " +
                                  std::to_string(half) + ", got " +
                                  std::to_string(b.convop_count) + " x " +
                                  std::to_string(b.convop_channels));
        if (b.convop_kernel < 1 || b.convop_kernel % 2 == 0)
            throw ValidationError(who + ": convop_kernel must be odd and positive");
    }
}

// Spatial size after running the whole de-convolution chain on a 1x1 input.
inline int output_size(const NetworkSpec& spec) {
    int s = 1;
    for (auto& b : spec.blocks)
        s = detail::deconv_out_size(s, b.dconv_kh, b.dconv_stride, b.dconv_pad);
    return s;
}

/**
 * The full-scale 160x160 family: six stride-2 blocks taking a 128-D template
 * (as a 128x1x1 tensor) through spatial sizes 5,10,20,40,80,160. The plain
 * variant keeps everything in one DconvOP per block; the nb variants give
 * half of each block's channels to the DconvOP and build the other half from
 * a chain of 3x3 ConvOPs, either sequential (A) or densely fed (B).
 *
 * The first block grows 1 -> 5 with a 5x5 kernel, no padding. Later blocks
 * double the size with 4x4 kernels, stride 2, padding 1.
 */
inline NetworkSpec canonical_spec(NetKind kind) {
    static const int chain[6] = {512, 256, 128, 64, 32, 16};
    NetworkSpec spec;
    spec.input_dim = 128;
    for (int i = 0; i < 6; ++i) {
        BlockSpec b;
        b.out_channels = chain[i];
        b.dconv_kh = b.dconv_kw = (i == 0) ? 5 : 4;
        b.dconv_stride = 2;
        b.dconv_pad = (i == 0) ? 0 : 1;
        if (kind == NetKind::dcnn) {
            b.kind = BlockKind::plain;
            b.convop_count = 0;
        } else {
            b.kind = (kind == NetKind::nbnet_a) ? BlockKind::nb_a : BlockKind::nb_b;
            b.convop_channels = 8;
            b.convop_count = chain[i] / 2 / 8;
        }
        spec.blocks.push_back(b);
    }
    validate_spec(spec);
    return spec;
}

// Same construction shrunk for fast CPU runs: output 32x32 (4 blocks) or
// 64x64 (5 blocks), channel budgets divided by 8, 4-channel ConvOPs.
inline NetworkSpec desk_spec(NetKind kind, int out_size = 32, int input_dim = 64) {
    int n_blocks = 0, s = 4;
    while (s < out_size && n_blocks < 16) {
        s *= 2;
        ++n_blocks;
    }
    n_blocks += 1;
    if (out_size < 8 || s != out_size)
        throw ValidationError("desk spec: out_size must be 4*2^k and >= 8, got " +
                              std::to_string(out_size));
    NetworkSpec spec;
    spec.input_dim = input_dim;
    int c = 8 << (n_blocks - 1);
    for (int i = 0; i < n_blocks; ++i, c /= 2) {
        BlockSpec b;
        b.out_channels = c;
        b.dconv_kh = b.dconv_kw = 4;
        b.dconv_stride = 2;
        b.dconv_pad = (i == 0) ? 0 : 1;
        if (kind == NetKind::dcnn) {
            b.kind = BlockKind::plain;
            b.convop_count = 0;
        } else {
            b.kind = (kind == NetKind::nbnet_a) ? BlockKind::nb_a : BlockKind::nb_b;
            b.convop_channels = 4;
            b.convop_count = c / 2 / 4;
        }
        spec.blocks.push_back(b);
    }
    validate_spec(spec);
    return spec;
}

inline nlohmann::json spec_to_json(const NetworkSpec& spec) {
    nlohmann::json j;
    j["input_dim"] = spec.input_dim;
    j["final_kernel"] = spec.final_kernel;
    j["loss_kind"] = spec.loss_kind;
    j["blocks"] = nlohmann::json::array();
    for (auto& b : spec.blocks) {
        nlohmann::json jb;
        jb["kind"] = to_string(b.kind);
        jb["out_channels"] = b.out_channels;
        jb["dconv_kernel"] = {b.dconv_kh, b.dconv_kw};
        jb["dconv_stride"] = b.dconv_stride;
        jb["dconv_pad"] = b.dconv_pad;
        jb["convop_channels"] = b.convop_channels;
        jb["convop_count"] = b.convop_count;
        jb["convop_kernel"] = b.convop_kernel;
        j["blocks"].push_back(jb);
    }
    return j;
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
    NetworkSpec spec;
    try {
        spec.input_dim = j.at("input_dim").get<int>();
        if (j.contains("final_kernel")) spec.final_kernel = j.at("final_kernel").get<int>();
        if (j.contains("loss_kind")) spec.loss_kind = j.at("loss_kind").get<std::string>();
        for (auto& jb : j.at("blocks")) {
            BlockSpec b;
            b.kind = block_kind_from(jb.at("kind").get<std::string>());
            b.out_channels = jb.at("out_channels").get<int>();
            b.dconv_kh = jb.at("dconv_kernel").at(0).get<int>();
            b.dconv_kw = jb.at("dconv_kernel").at(1).get<int>();
            b.dconv_stride = jb.at("dconv_stride").get<int>();
            b.dconv_pad = jb.at("dconv_pad").get<int>();
            if (jb.contains("convop_channels"))
                b.convop_channels = jb.at("convop_channels").get<int>();
            b.convop_count = jb.at("convop_count").get<int>();
            if (jb.contains("convop_kernel")) b.convop_kernel = jb.at("convop_kernel").get<int>();
            spec.blocks.push_back(b);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("network spec json: ") + e.what());
    }
    validate_spec(spec);
    return spec;
}

template <class T>
struct BlockActivation {
    Tensor<T> x_dconv;
    std::vector<Tensor<T>> x_convops;
    Tensor<T> concatenated;
};

struct InitPolicy {
    std::uint64_t seed = 1;
    double stddev = 0.02;
};

struct ParameterBreakdown {
    long long kernel_weights = 0;
    long long bn_affine = 0;
    long long total_trainable = 0;
};

/**
 * Template-to-image generator g(y). Convolutions carry no bias terms; every
 * one is followed by batch normalization, which supplies the shift. The
 * reported parameter count is the kernel-weight total; see
 * docs/parameter_accounting.md for the convention and the full breakdown.
 */
template <class T = float>
class ReconstructionModel {
public:
    ReconstructionModel() = default;

    explicit ReconstructionModel(const NetworkSpec& spec) : spec_(spec) {
        validate_spec(spec_);
        int in_ch = spec_.input_dim;
        for (auto& bs : spec_.blocks) {
            Block b;
            int dc = bs.dconv_channels();
            b.dconv = ConvTranspose2d<T>(in_ch, dc, bs.dconv_kh, bs.dconv_stride, bs.dconv_pad);
            b.dconv_bn = BatchNorm2d<T>(dc);
            int seen = dc;
            for (int p = 0; p < bs.convop_count; ++p) {
                int cin = bs.kind == BlockKind::nb_a
                              ? (p == 0 ? dc : bs.convop_channels)
                              : seen;
                b.convs.emplace_back(cin, bs.convop_channels, bs.convop_kernel, 1,
                                     bs.convop_kernel / 2);
                b.conv_bns.emplace_back(bs.convop_channels);
                b.conv_relus.emplace_back();
                seen += bs.convop_channels;
            }
            blocks_.push_back(std::move(b));
            in_ch = bs.out_channels;
        }
        final_ = Conv2d<T>(in_ch, 3, spec_.final_kernel, 1, spec_.final_kernel / 2);
        final_bn_ = BatchNorm2d<T>(3);
    }

    ReconstructionModel(const NetworkSpec& spec, const InitPolicy& init)
        : ReconstructionModel(spec) {
        Rng rng(mix_seed(init.seed, 0x9b4e7ull));
        for (auto& b : blocks_) {
            b.dconv.init_normal(rng, init.stddev);
            for (auto& c : b.convs) c.init_normal(rng, init.stddev);
        }
        final_.init_normal(rng, init.stddev);
    }

    const NetworkSpec& spec() const { return spec_; }
    int output_size() const { return nbnet::output_size(spec_); }

    Tensor<T> forward(const Tensor<T>& x) {
        check_input(x);
        Tensor<T> h = x;
        for (std::size_t d = 0; d < blocks_.size(); ++d) h = block_fwd(d, h, true);
        return final_tanh_.forward(final_bn_.forward(final_.forward(h)));
    }

    Tensor<T> infer(const Tensor<T>& x) const {
        check_input(x);
        Tensor<T> h = x;
        for (std::size_t d = 0; d < blocks_.size(); ++d)
            h = const_cast<ReconstructionModel*>(this)->block_inf(d, h);
        return final_tanh_.infer(final_bn_.infer(final_.infer(h)));
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> d = final_.backward(final_bn_.backward(final_tanh_.backward(dy)));
        for (std::size_t i = blocks_.size(); i-- > 0;) d = block_bwd(i, d);
        return d;
    }

    // Shape probe for one block in isolation (inference statistics).
    BlockActivation<T> block_forward(std::size_t block_index, const Tensor<T>& input) const {
        if (block_index >= blocks_.size())
            throw ValidationError("block_forward: block index out of range");
        const Block& b = blocks_[block_index];
        const BlockSpec& bs = spec_.blocks[block_index];
        BlockActivation<T> act;
        act.x_dconv = b.relu.infer(b.dconv_bn.infer(b.dconv.infer(input)));
        act.x_convops.reserve(b.convs.size());
        std::vector<const Tensor<T>*> parts{&act.x_dconv};
        for (std::size_t p = 0; p < b.convs.size(); ++p) {
            Tensor<T> in_p;
            if (bs.kind == BlockKind::nb_a)
                in_p = (p == 0) ? act.x_dconv : act.x_convops.back();
            else
                in_p = concat_channels(parts);
            act.x_convops.push_back(
                b.conv_relus[p].infer(b.conv_bns[p].infer(b.convs[p].infer(in_p))));
            parts.push_back(&act.x_convops.back());
        }
        act.concatenated = b.convs.empty() ? act.x_dconv : concat_channels(parts);
        return act;
    }

    ParamList<T> params() {
        ParamList<T> out;
        for (std::size_t d = 0; d < blocks_.size(); ++d) {
            std::string bp = "block" + std::to_string(d);
            blocks_[d].dconv.collect(out, bp + ".dconv");
            blocks_[d].dconv_bn.collect(out, bp + ".dconv_bn");
            for (std::size_t p = 0; p < blocks_[d].convs.size(); ++p) {
                blocks_[d].convs[p].collect(out, bp + ".convop" + std::to_string(p));
                blocks_[d].conv_bns[p].collect(out, bp + ".convop" + std::to_string(p) + "_bn");
            }
        }
        final_.collect(out, "final");
        final_bn_.collect(out, "final_bn");
        return out;
    }

    ParameterBreakdown count_parameter_breakdown() {
        ParameterBreakdown pb;
        for (auto& p : params()) {
            auto n = (long long)p.value->numel();
            if (p.name.find("_bn.") != std::string::npos)
                pb.bn_affine += n;
            else
                pb.kernel_weights += n;
        }
        pb.total_trainable = pb.kernel_weights + pb.bn_affine;
        return pb;
    }

    void save(const std::string& path) {
        CheckpointWriter w(path, "NBMD", 1);
        w.add_text("spec", spec_to_json(spec_).dump());
        for (auto& p : params()) w.add_tensor(p.name, *p.value);
        for (std::size_t d = 0; d < blocks_.size(); ++d) {
            std::string bp = "block" + std::to_string(d);
            add_running(w, bp + ".dconv_bn", blocks_[d].dconv_bn);
            for (std::size_t p = 0; p < blocks_[d].conv_bns.size(); ++p)
                add_running(w, bp + ".convop" + std::to_string(p) + "_bn",
                            blocks_[d].conv_bns[p]);
        }
        add_running(w, "final_bn", final_bn_);
        w.finish();
    }

    static ReconstructionModel load(const std::string& path) {
        CheckpointReader r(path, "NBMD", 1);
        NetworkSpec spec;
        try {
            spec = spec_from_json(nlohmann::json::parse(r.text("spec")));
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointError(std::string("model checkpoint spec: ") + e.what());
        }
        ReconstructionModel m(spec);
        for (auto& p : m.params()) {
            Tensor<T> t = r.template tensor<T>(p.name);
            check_same_shape(t, *p.value, "model checkpoint " + p.name);
            *p.value = std::move(t);
        }
        for (std::size_t d = 0; d < m.blocks_.size(); ++d) {
            std::string bp = "block" + std::to_string(d);
            m.read_running(r, bp + ".dconv_bn", m.blocks_[d].dconv_bn);
            for (std::size_t p = 0; p < m.blocks_[d].conv_bns.size(); ++p)
                m.read_running(r, bp + ".convop" + std::to_string(p) + "_bn",
                               m.blocks_[d].conv_bns[p]);
        }
        m.read_running(r, "final_bn", m.final_bn_);
        return m;
    }

private:
    struct Block {
        ConvTranspose2d<T> dconv;
        BatchNorm2d<T> dconv_bn;
        ReLU<T> relu;
        std::vector<Conv2d<T>> convs;
        std::vector<BatchNorm2d<T>> conv_bns;
        std::vector<ReLU<T>> conv_relus;
        // training caches
        std::vector<Tensor<T>> outs;  // X', X_1..X_P
    };

    void check_input(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != std::size_t(spec_.input_dim) || x.dim(2) != 1 ||
            x.dim(3) != 1)
            throw ShapeError("model expects (N," + std::to_string(spec_.input_dim) +
                             ",1,1) input, got " + shape_str(x.shape));
    }

    Tensor<T> block_fwd(std::size_t d, const Tensor<T>& x, bool train) {
        Block& b = blocks_[d];
        const BlockSpec& bs = spec_.blocks[d];
        b.outs.clear();
        b.outs.reserve(b.convs.size() + 1);
        b.outs.push_back(b.relu.forward(b.dconv_bn.forward(b.dconv.forward(x))));
        std::vector<const Tensor<T>*> parts{&b.outs[0]};
        for (std::size_t p = 0; p < b.convs.size(); ++p) {
            Tensor<T> in_p;
            if (bs.kind == BlockKind::nb_a)
                in_p = (p == 0) ? b.outs[0] : b.outs.back();
            else
                in_p = concat_channels(parts);
            b.outs.push_back(
                b.conv_relus[p].forward(b.conv_bns[p].forward(b.convs[p].forward(in_p))));
            parts.push_back(&b.outs.back());
        }
        (void)train;
        return b.convs.empty() ? b.outs[0] : concat_channels(parts);
    }

    Tensor<T> block_inf(std::size_t d, const Tensor<T>& x) {
        Block& b = blocks_[d];
        const BlockSpec& bs = spec_.blocks[d];
        std::vector<Tensor<T>> outs;
        outs.reserve(b.convs.size() + 1);
        outs.push_back(b.relu.infer(b.dconv_bn.infer(b.dconv.infer(x))));
        std::vector<const Tensor<T>*> parts{&outs[0]};
        for (std::size_t p = 0; p < b.convs.size(); ++p) {
            Tensor<T> in_p;
            if (bs.kind == BlockKind::nb_a)
                in_p = (p == 0) ? outs[0] : outs.back();
            else
                in_p = concat_channels(parts);
            outs.push_back(b.conv_relus[p].infer(b.conv_bns[p].infer(b.convs[p].infer(in_p))));
            parts.push_back(&outs.back());
        }
        return b.convs.empty() ? std::move(outs[0]) : concat_channels(parts);
    }

    Tensor<T> block_bwd(std::size_t d, const Tensor<T>& dout) {
        Block& b = blocks_[d];
        const BlockSpec& bs = spec_.blocks[d];
        const std::size_t P = b.convs.size();
        std::vector<Tensor<T>> douts;
        douts.reserve(P + 1);
        if (P == 0) {
            douts.push_back(dout);
        } else {
            std::size_t c0 = 0;
            for (std::size_t i = 0; i <= P; ++i) {
                std::size_t c = b.outs[i].dim(1);
                douts.push_back(slice_channels(dout, c0, c));
                c0 += c;
            }
        }
        for (std::size_t p = P; p-- > 0;) {
            Tensor<T> din =
                b.convs[p].backward(b.conv_bns[p].backward(b.conv_relus[p].backward(douts[p + 1])));
            if (bs.kind == BlockKind::nb_a) {
                add_inplace(douts[p == 0 ? 0 : p], din);
            } else {
                std::size_t c0 = 0;
                for (std::size_t j = 0; j <= p; ++j) {
                    std::size_t c = b.outs[j].dim(1);
                    Tensor<T> part = slice_channels(din, c0, c);
                    add_inplace(douts[j], part);
                    c0 += c;
                }
            }
        }
        return b.dconv.backward(b.dconv_bn.backward(b.relu.backward(douts[0])));
    }

    void add_running(CheckpointWriter& w, const std::string& prefix, BatchNorm2d<T>& bn) {
        w.add_tensor(prefix + ".run_mean", bn.running_mean());
        w.add_tensor(prefix + ".run_var", bn.running_var());
    }

    void read_running(CheckpointReader& r, const std::string& prefix, BatchNorm2d<T>& bn) {
        bn.running_mean() = r.template tensor<T>(prefix + ".run_mean");
        bn.running_var() = r.template tensor<T>(prefix + ".run_var");
    }

    NetworkSpec spec_;
    std::vector<Block> blocks_;
    Conv2d<T> final_;
    BatchNorm2d<T> final_bn_;
    Tanh<T> final_tanh_;
};

// Kernel-weight total; the headline number quoted for each architecture.
template <class T>
long long count_parameters(ReconstructionModel<T>& model) {
    return model.count_parameter_breakdown().kernel_weights;
}

template <class T = float>
FaceImage<T> reconstruct(const ReconstructionModel<T>& model, const Template<T>& tpl) {
    if (int(tpl.vector.size()) != model.spec().input_dim)
        throw ValidationError("reconstruct: template dimension " +
                              std::to_string(tpl.vector.size()) + " does not match model input " +
                              std::to_string(model.spec().input_dim));
    Tensor<T> x({1, tpl.vector.size(), 1, 1});
    std::copy(tpl.vector.begin(), tpl.vector.end(), x.data());
    Tensor<T> y = model.infer(x);
    FaceImage<T> out;
    out.pixels = y.reshaped({3, y.dim(2), y.dim(3)});
    out.subject_id = tpl.subject_id;
    out.sample_id = tpl.sample_id;
    return out;
}

}

#endif
