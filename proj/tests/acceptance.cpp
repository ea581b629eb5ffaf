/*
 * Acceptance gate. One criterion per invocation: the binary runs the named
 * check, prints a single PASS or FAIL line with the measured numbers, and
 * exits 0 or 1. Heavy artifacts (the synthetic dataset, the stand-in
 * extractor, the generator, trained reconstruction models) are cached under
 * $NBNET_ACCEPT_CACHE keyed by a digest of every knob that went into them,
 * so the desk-scale criteria share work across invocations and reruns.
 */
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbnet/attack_eval.hpp"
#include "nbnet/data.hpp"
#include "nbnet/extractor.hpp"
#include "nbnet/gan.hpp"
#include "nbnet/linalg.hpp"
#include "nbnet/losses.hpp"
#include "nbnet/nbnet.hpp"
#include "nbnet/norta.hpp"
#include "nbnet/rng.hpp"
#include "nbnet/serialize.hpp"
#include "nbnet/stats.hpp"
#include "nbnet/synth.hpp"
#include "nbnet/tensor.hpp"
#include "nbnet/trainer.hpp"

#include "helpers.hpp"

using namespace nbnet;
namespace fs = std::filesystem;

namespace {

struct Failed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void need(bool ok, const std::string& msg) {
    if (!ok) throw Failed(msg);
}

std::string num(double v) {
    char b[64];
    std::snprintf(b, sizeof b, "%g", v);
    return b;
}

std::string pct(double v) {
    char b[64];
    std::snprintf(b, sizeof b, "%.2f", v);
    return b;
}

// ---------------------------------------------------------------------------
// Artifact cache

fs::path cache_root() {
    const char* env = std::getenv("NBNET_ACCEPT_CACHE");
    fs::path root = (env && *env) ? fs::path(env) : fs::path("acceptance_cache");
    fs::create_directories(root);
    return fs::absolute(root);
}

// Returns a directory that `build` has fully populated. The key digests the
// recipe, so changing any upstream knob retires the old entry instead of
// reusing it; a .done marker guards against half-built leftovers. Builders
// write into `tmp` but get told the final home so anything that embeds paths
// (the dataset manifest) can point there before the rename.
std::string cached(const std::string& name, const std::string& recipe,
                   const std::function<void(const fs::path& tmp, const fs::path& home)>& build) {
    fs::path root = cache_root();
    fs::path dst = root / (name + "_" + sha256_hex(recipe).substr(0, 12));
    if (fs::exists(dst / ".done")) return dst.string();
    fs::path tmp = root / (dst.filename().string() + ".tmp" + std::to_string(getpid()));
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    build(tmp, dst);
    std::ofstream(tmp / ".done") << recipe << "\n";
    fs::remove_all(dst);
    fs::rename(tmp, dst);
    return dst.string();
}

// ---------------------------------------------------------------------------
// Structural oracles

const long long kPublishedKernelCount[3] = {4432304, 2289040, 3411472};
const int kChain[6] = {512, 256, 128, 64, 32, 16};
const int kSpatial[6] = {5, 10, 20, 40, 80, 160};

std::string check_param_count(NetKind kind) {
    ReconstructionModel<float> m(canonical_spec(kind));
    ParameterBreakdown pb = m.count_parameter_breakdown();
    long long want = kPublishedKernelCount[int(kind)];
    std::string detail = "kernel weights " + std::to_string(pb.kernel_weights) +
                         " (bn affine " + std::to_string(pb.bn_affine) + ", total " +
                         std::to_string(pb.total_trainable) + "), reference count " +
                         std::to_string(want);
    need(pb.kernel_weights == want,
         detail + "; off by " + std::to_string(pb.kernel_weights - want) +
             ", see docs/parameter_accounting.md");
    return detail;
}

std::string check_shape_chain() {
    for (NetKind kind : {NetKind::dcnn, NetKind::nbnet_a, NetKind::nbnet_b}) {
        ReconstructionModel<float> m(canonical_spec(kind), InitPolicy{7, 0.02});
        Rng rng(11);
        Tensor<float> h({1, std::size_t(m.spec().input_dim), 1, 1});
        for (auto& v : h.v) v = float(rng.uniform(-1.0, 1.0));
        Tensor<float> input = h;
        for (int i = 0; i < 6; ++i) {
            BlockActivation<float> act = m.block_forward(std::size_t(i), h);
            const Tensor<float>& c = act.concatenated;
            std::string at = to_string(kind) + " block " + std::to_string(i);
            need(c.rank() == 4 && c.dim(0) == 1, at + ": expected a rank-4 batch of one");
            need(int(c.dim(1)) == kChain[i] && int(c.dim(2)) == kSpatial[i] &&
                     int(c.dim(3)) == kSpatial[i],
                 at + ": got " + std::to_string(c.dim(1)) + "x" + std::to_string(c.dim(2)) +
                     "x" + std::to_string(c.dim(3)) + ", expected " +
                     std::to_string(kChain[i]) + "x" + std::to_string(kSpatial[i]) + "x" +
                     std::to_string(kSpatial[i]));
            h = c;
        }
        Tensor<float> out = m.infer(input);
        need(out.rank() == 4 && out.dim(1) == 3 && out.dim(2) == 160 && out.dim(3) == 160,
             to_string(kind) + ": full pass rendered " + std::to_string(out.dim(1)) + "x" +
                 std::to_string(out.dim(2)) + "x" + std::to_string(out.dim(3)) +
                 ", expected 3x160x160");
    }
    return "all three canonical stacks walk 512x5x5 through 3x160x160 and render 3x160x160";
}

std::string check_channel_composition() {
    for (NetKind kind : {NetKind::nbnet_a, NetKind::nbnet_b}) {
        ReconstructionModel<float> m(canonical_spec(kind), InitPolicy{7, 0.02});
        std::map<std::string, const Tensor<float>*> weight;
        for (auto& p : m.params()) weight[p.name] = p.value;

        Rng rng(13);
        Tensor<float> h({1, std::size_t(m.spec().input_dim), 1, 1});
        for (auto& v : h.v) v = float(rng.uniform(-1.0, 1.0));
        for (int d = 0; d < 6; ++d) {
            const int c = kChain[d];
            const int half = c / 2;
            const std::string at = to_string(kind) + " block " + std::to_string(d);
            const BlockSpec& bs = m.spec().blocks[std::size_t(d)];
            need(bs.convop_channels == 8, at + ": convop width " +
                                              std::to_string(bs.convop_channels) +
                                              ", expected 8");
            need(bs.convop_count * 8 == half,
                 at + ": " + std::to_string(bs.convop_count) +
                     " convops x 8 channels != " + std::to_string(half));

            BlockActivation<float> act = m.block_forward(std::size_t(d), h);
            need(int(act.x_dconv.dim(1)) == half,
                 at + ": dconv emits " + std::to_string(act.x_dconv.dim(1)) +
                     " channels, expected " + std::to_string(half));
            need(int(act.x_convops.size()) == bs.convop_count,
                 at + ": produced " + std::to_string(act.x_convops.size()) + " convops");
            for (auto& t : act.x_convops)
                need(t.dim(1) == 8, at + ": a convop emitted " + std::to_string(t.dim(1)) +
                                        " channels");
            need(int(act.concatenated.dim(1)) == c,
                 at + ": concatenation carries " + std::to_string(act.concatenated.dim(1)) +
                     " channels, expected " + std::to_string(c));

            for (int p = 0; p < bs.convop_count; ++p) {
                std::string key =
                    "block" + std::to_string(d) + ".convop" + std::to_string(p) + ".w";
                auto it = weight.find(key);
                need(it != weight.end(), at + ": missing parameter " + key);
                int got_in = int(it->second->dim(1));
                int want_in = (kind == NetKind::nbnet_a) ? (p == 0 ? half : 8)
                                                         : half + 8 * p;
                need(got_in == want_in,
                     at + " convop " + std::to_string(p) + ": input width " +
                         std::to_string(got_in) + ", expected " + std::to_string(want_in));
            }
            h = act.concatenated;
        }
    }
    return "every nb block splits c'/2 to the dconv and P x 8 = c'/2 to the convops; "
           "variant A feeds {c'/2, 8, 8, ...}, variant B {c'/2, c'/2+8, c'/2+16, ...}";
}

// ---------------------------------------------------------------------------
// Metric oracles

std::string check_metric_oracle() {
    Rng rng(20260817);
    auto grid = [&](double lo, double hi) {
        double u = rng.uniform(lo, hi);
        return std::min(1.0, std::max(-1.0, std::round(u * 20.0) / 20.0));
    };

    int verified = 0, infeasible = 0;
    for (int t = 0; t < 200; ++t) {
        ScoreSet s;
        std::size_t ng = 1 + rng.index(400);
        std::size_t ni = 1 + rng.index(600);
        for (std::size_t i = 0; i < ng; ++i) s.genuine.push_back(grid(-1, 1));
        for (std::size_t i = 0; i < ni; ++i) s.impostor.push_back(grid(-1, 1));
        double far = (t % 4 == 0) ? rng.uniform(0.001, 0.999)
                                  : std::vector<double>{0.5, 0.1, 0.01}[t % 3];
        tst::OracleTarFar want = tst::oracle_tar_at_far(s.genuine, s.impostor, far);
        if (!want.found) {
            bool threw = false;
            try {
                tar_at_far(s, {far});
            } catch (const InsufficientImpostorsError&) {
                threw = true;
            }
            need(threw, "set " + std::to_string(t) + ": enumeration finds no threshold at FAR " +
                            num(far) + " but tar_at_far returned one");
            ++infeasible;
            continue;
        }
        VerificationResult got = tar_at_far(s, {far});
        need(got.rows[0].threshold == want.threshold,
             "set " + std::to_string(t) + ": threshold " + num(got.rows[0].threshold) +
                 " vs enumerated " + num(want.threshold));
        need(got.rows[0].tar == want.tar, "set " + std::to_string(t) + ": TAR " +
                                              num(got.rows[0].tar) + " vs enumerated " +
                                              num(want.tar));
        ++verified;
    }

    tst::TempDir td;
    ImageManifest gal = load_manifest(tst::make_dataset(td.path + "/ds", 40, 4, 16, 3));
    auto ex = ExtractorHandle<float>::load(tst::forge_extractor(td.path + "/ex.ckpt", 16, 16));
    EvalFold all;
    for (std::size_t i = 0; i < gal.size(); ++i) all.image_indices.push_back(i);
    detail::FoldData<float> fd = detail::load_fold(gal, ex, all);
    std::vector<std::vector<double>> gal_vecs;
    const std::size_t d = fd.templates.dim(1);
    for (std::size_t i = 0; i < fd.templates.dim(0); ++i)
        gal_vecs.emplace_back(fd.templates.data() + i * d, fd.templates.data() + (i + 1) * d);

    const std::size_t px = 3 * 16 * 16;
    for (int t = 0; t < 200; ++t) {
        std::size_t np = 1 + rng.index(40);
        Tensor<float> probes({np, 3, 16, 16});
        std::vector<std::string> labels;
        for (std::size_t p = 0; p < np; ++p) {
            if (rng.index(2) == 0) {
                std::size_t g = rng.index(gal.size());
                std::copy_n(fd.images.data() + g * px, px, probes.data() + p * px);
            } else {
                for (std::size_t i = 0; i < px; ++i)
                    probes.data()[p * px + i] = float(rng.uniform(-1.0, 1.0));
            }
            labels.push_back("s" + std::to_string(rng.index(40)));
        }
        IdentificationResult got = rank1_identification(gal, ex, probes, labels);
        Tensor<float> pt = ex.extract_batch(probes);
        std::vector<std::vector<double>> probe_vecs;
        for (std::size_t p = 0; p < np; ++p)
            probe_vecs.emplace_back(pt.data() + p * d, pt.data() + (p + 1) * d);
        double want = tst::oracle_rank1(gal_vecs, fd.subjects, probe_vecs, labels);
        need(got.rank1_percent == want,
             "identification trial " + std::to_string(t) + ": " + num(got.rank1_percent) +
                 "% vs enumerated " + num(want) + "%");
    }
    return std::to_string(verified) + " verification sets (+" + std::to_string(infeasible) +
           " infeasible-FAR sets) and 200 identification trials match enumeration exactly";
}

std::string check_identity_anchors() {
    tst::TempDir td;
    ImageManifest manifest = load_manifest(tst::make_dataset(td.path + "/ds", 12, 4, 16, 5));
    auto ex = ExtractorHandle<float>::load(tst::forge_extractor(td.path + "/ex.ckpt", 16, 8));
    IdentityReconstructor<float> ident;
    const std::vector<double> fars{0.2, 0.1, 0.05};
    for (const EvalFold& fold : make_folds(manifest, 3, 7)) {
        ScoreSet s = build_type1_scores(manifest, ident, ex, fold);
        VerificationResult r = tar_at_far(s, fars);
        for (auto& row : r.rows)
            need(row.tar == 100.0, "fold " + std::to_string(fold.id) + " FAR " + num(row.far) +
                                       ": type-I TAR " + pct(row.tar) + "%, expected 100%");
    }
    EvalFold all;
    for (std::size_t i = 0; i < manifest.size(); ++i) all.image_indices.push_back(i);
    detail::FoldData<float> fd = detail::load_fold(manifest, ex, all);
    IdentificationResult idr = rank1_identification(manifest, ex, fd.images, fd.subjects);
    need(idr.rank1_percent == 100.0,
         "gallery-as-probe rank-1 " + pct(idr.rank1_percent) + "%, expected 100%");
    return "type-I TAR 100% at FARs {0.2, 0.1, 0.05} on 3 folds; gallery-as-probe rank-1 100%";
}

// ---------------------------------------------------------------------------
// Gradient checks, run in double so the finite differences stay clean.

double fd_slope(double* slot, double h, const std::function<double()>& f) {
    double keep = *slot;
    *slot = keep + h;
    double up = f();
    *slot = keep - h;
    double down = f();
    *slot = keep;
    return (up - down) / (2 * h);
}

// The probed slot is picked as the largest-magnitude analytic entry among a
// few random candidates, so the relative error never divides by noise.
std::size_t pick_slot(const Tensor<double>& grad, Rng& rng) {
    std::size_t best = rng.index(grad.numel());
    for (int c = 0; c < 4; ++c) {
        std::size_t i = rng.index(grad.numel());
        if (std::fabs(grad.v[i]) > std::fabs(grad.v[best])) best = i;
    }
    return best;
}

std::string check_gradients() {
    Rng rng(606);
    const double ks[4] = {1.0, 1.5, 2.0, 3.0};
    double worst_pixel = 0;
    for (int t = 0; t < 50; ++t) {
        std::size_t n = 1 + rng.index(2), s = 4 + 2 * rng.index(2);
        Tensor<double> x({n, 3, s, s}), xp({n, 3, s, s});
        for (std::size_t i = 0; i < x.numel(); ++i) {
            x.v[i] = rng.uniform(-0.9, 0.9);
            // keep the pixel gap away from the k=1 kink
            double gap = rng.uniform(0.05, 0.8) * (rng.index(2) ? 1 : -1);
            xp.v[i] = std::min(0.95, std::max(-0.95, x.v[i] + gap));
        }
        LossConfig cfg;
        cfg.kind = "pixel";
        cfg.k = ks[t % 4];
        auto [loss, grad] = batch_loss_grad(x, xp, cfg);
        (void)loss;
        std::size_t i = pick_slot(grad, rng);
        double numeric = fd_slope(&xp.v[i], 1e-6, [&] { return batch_loss(x, xp, cfg); });
        worst_pixel = std::max(worst_pixel, tst::rel_err(grad.v[i], numeric));
    }
    need(worst_pixel < 1e-3, "pixel loss: worst relative error " + num(worst_pixel));

    StandInNet<double> net(8, 6, {4, 8}, 1);
    Rng init(33);
    net.init(init);
    StandInFeatureMap<double> fmap(net, "probe");
    LossConfig pcfg;
    pcfg.kind = "perceptual";
    pcfg.feature_id = fmap.id();
    double worst_perc = 0;
    for (int t = 0; t < 50; ++t) {
        Tensor<double> x({2, 3, 8, 8}), xp({2, 3, 8, 8});
        for (std::size_t i = 0; i < x.numel(); ++i) {
            x.v[i] = rng.uniform(-0.9, 0.9);
            xp.v[i] = rng.uniform(-0.9, 0.9);
        }
        auto [loss, grad] = batch_loss_grad(x, xp, pcfg, &fmap);
        (void)loss;
        std::size_t i = pick_slot(grad, rng);
        double numeric =
            fd_slope(&xp.v[i], 1e-6, [&] { return batch_loss(x, xp, pcfg, &fmap); });
        worst_perc = std::max(worst_perc, tst::rel_err(grad.v[i], numeric));
    }
    need(worst_perc < 1e-3, "perceptual loss: worst relative error " + num(worst_perc));

    ReconstructionModel<double> model(desk_spec(NetKind::nbnet_b, 8, 6), InitPolicy{5, 0.05});
    ParamList<double> params = model.params();
    LossConfig ncfg;
    ncfg.kind = "pixel";
    ncfg.k = 2.0;
    double worst_net = 0;
    for (int round = 0; round < 5; ++round) {
        Tensor<double> y({2, 6, 1, 1}), target({2, 3, 8, 8});
        for (auto& v : y.v) v = rng.uniform(-1.0, 1.0);
        for (auto& v : target.v) v = rng.uniform(-0.9, 0.9);
        auto loss_of = [&] {
            Tensor<double> out = model.forward(y);
            return batch_loss(target, out, ncfg);
        };
        zero_grads(params);
        Tensor<double> out = model.forward(y);
        auto [loss, dout] = batch_loss_grad(target, out, ncfg);
        (void)loss;
        model.backward(dout);
        for (int probe = 0; probe < 10; ++probe) {
            ParamRef<double>& p = params[rng.index(params.size())];
            std::size_t i = pick_slot(*p.grad, rng);
            double analytic = p.grad->v[i];
            double numeric = fd_slope(&p.value->v[i], 1e-6, loss_of);
            worst_net = std::max(worst_net, tst::rel_err(analytic, numeric));
        }
    }
    need(worst_net < 1e-3, "2-block network: worst relative error " + num(worst_net));

    return "worst relative errors over 50 probes each: pixel " + num(worst_pixel) +
           ", perceptual " + num(worst_perc) + ", network " + num(worst_net) + " (< 1e-3)";
}

// ---------------------------------------------------------------------------
// Schedule and determinism

std::string check_schedule_determinism() {
    tst::TempDir td;
    ImageManifest manifest = load_manifest(tst::make_dataset(td.path + "/ds", 6, 2, 16, 9));
    std::string ex_path = tst::forge_extractor(td.path + "/ex.ckpt", 16, 8);
    auto ex = ExtractorHandle<float>::load(ex_path);

    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.lr0 = 1e-3;
    cfg.lr_decay = 0.5;
    cfg.lr_decay_every = 10;
    cfg.checkpoint_every = 10;
    cfg.seed = 21;
    LossConfig pixel;
    pixel.kind = "pixel";
    pixel.k = 1.0;

    auto run = [&](const std::string& dir) {
        ReconstructionModel<float> m(desk_spec(NetKind::dcnn, 16, 8), InitPolicy{9, 0.02});
        TrainingStream<float> stream(manifest, ex, cfg.batch_size, 77);
        train_nbnet(m, stream, pixel, cfg, 35, dir);
        m.save(dir + "/model.ckpt");
        std::vector<VerificationResult> folds;
        for (const EvalFold& fold : make_folds(manifest, 2, 5)) {
            ModelReconstructor<float> rec(m, "dcnn");
            folds.push_back(tar_at_far(build_type1_scores(manifest, rec, ex, fold), {0.3}));
        }
        AttackReport rep;
        rep.model = "dcnn";
        rep.dataset = "synth";
        rep.attack = "type1";
        rep.rows = aggregate_folds(folds);
        rep.folds = folds;
        render_report({rep}, dir + "/report");
    };
    run(td.path + "/a");
    run(td.path + "/b");

    std::ifstream log(td.path + "/a/train_log.jsonl");
    need(bool(log), "missing training log");
    std::string line;
    int checked = 0;
    while (std::getline(log, line)) {
        if (line.find("\"batch\"") == std::string::npos) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        long long b = j.at("batch").get<long long>();
        double logged = j.at("lr").get<double>();
        double want = lr_at(b, cfg);
        need(logged == want, "batch " + std::to_string(b) + ": logged rate " + num(logged) +
                                 " != lr_at " + num(want));
        ++checked;
    }
    need(checked == 35, "expected 35 logged batches, saw " + std::to_string(checked));

    int compared = 0;
    for (auto& entry : fs::directory_iterator(td.path + "/a")) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        if (name == "train_log.jsonl") continue;  // carries wall-clock times
        std::string a = tst::slurp(entry.path().string());
        std::string b = tst::slurp(td.path + "/b/" + name);
        need(a == b && !a.empty(), "rerun differs in " + name);
        ++compared;
    }
    for (const char* name : {"results.json", "report.md", "report.csv", "roc.svg"}) {
        std::string a = tst::slurp(td.path + "/a/report/" + std::string(name));
        std::string b = tst::slurp(td.path + "/b/report/" + std::string(name));
        need(a == b && !a.empty(), std::string("rerun differs in report/") + name);
        ++compared;
    }
    return std::to_string(checked) + " logged rates equal lr_at bitwise; rerun reproduced " +
           std::to_string(compared) + " checkpoint and report files byte-identically";
}

// ---------------------------------------------------------------------------
// NORTA statistical suite

std::string check_norta_suite() {
    Rng rng(4242);
    const std::size_t n = 100000;
    double worst_cov_se = 0, worst_ks_ratio = 0;
    for (int c = 0; c < 10; ++c) {
        std::size_t k = 2 + rng.index(4);
        std::vector<Marginal> ms;
        for (std::size_t i = 0; i < k; ++i) {
            switch (rng.index(3)) {
                case 0:
                    ms.push_back(Marginal::normal(rng.uniform(-2, 2), rng.uniform(0.5, 2)));
                    break;
                case 1: {
                    double lo = rng.uniform(-2, 0);
                    ms.push_back(Marginal::uniform(lo, lo + rng.uniform(0.5, 3)));
                    break;
                }
                default:
                    ms.push_back(Marginal::exponential(rng.uniform(0.5, 3)));
            }
        }
        // random PSD correlation, shrunk to stay attainable for every
        // marginal pair, then scaled out to a covariance
        std::vector<double> g(k * k);
        for (auto& v : g) v = rng.uniform(-1, 1);
        std::vector<double> gg = mat_mul_t(g, k);
        std::vector<double> sigma(k * k);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                double corr = gg[i * k + j] / std::sqrt(gg[i * k + i] * gg[j * k + j]);
                double si = std::sqrt(ms[i].variance()), sj = std::sqrt(ms[j].variance());
                sigma[i * k + j] = (i == j) ? si * sj : 0.5 * corr * si * sj;
            }

        NortaModel model = build_norta(ms, sigma);
        Tensor<double> x = norta_sample(model, uniform_inputs(n, k, 9000 + c));

        std::vector<std::vector<double>> cols(k);
        std::vector<double> means(k, 0);
        for (std::size_t i = 0; i < k; ++i) {
            cols[i].resize(n);
            for (std::size_t r = 0; r < n; ++r) cols[i][r] = x.v[r * k + i];
            means[i] = mean_of(cols[i]);
        }
        double crit = ks_critical(n, 0.01);
        for (std::size_t i = 0; i < k; ++i) {
            const Marginal& m = ms[i];
            double ks = ks_statistic(cols[i], [&](double v) { return m.cdf(v); });
            worst_ks_ratio = std::max(worst_ks_ratio, ks / crit);
            need(ks < crit, "case " + std::to_string(c) + " coordinate " + std::to_string(i) +
                                " (" + m.describe() + "): KS " + num(ks) + " >= critical " +
                                num(crit));
        }
        std::vector<double> prod(n);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = i; j < k; ++j) {
                for (std::size_t r = 0; r < n; ++r)
                    prod[r] = (x.v[r * k + i] - means[i]) * (x.v[r * k + j] - means[j]);
                double chat = mean_of(prod);
                double se = stddev_of(prod) / std::sqrt(double(n));
                double dev = std::fabs(chat - sigma[i * k + j]) / se;
                worst_cov_se = std::max(worst_cov_se, dev);
                need(dev <= 3.0, "case " + std::to_string(c) + " entry (" + std::to_string(i) +
                                     "," + std::to_string(j) + "): sample covariance " +
                                     num(chat) + " vs target " + num(sigma[i * k + j]) +
                                     " is " + num(dev) + " standard errors away");
            }
    }

    double worst_eig = 1;
    for (int c = 0; c < 10; ++c) {
        std::size_t k = 3 + rng.index(3);
        std::vector<double> lam;
        double mineig = 0;
        for (int attempt = 0; attempt < 200; ++attempt) {
            lam.assign(k * k, 0.0);
            for (std::size_t i = 0; i < k; ++i) {
                lam[i * k + i] = 1.0;
                for (std::size_t j = i + 1; j < k; ++j)
                    lam[i * k + j] = lam[j * k + i] = rng.uniform(-1.2, 1.2);
            }
            mineig = jacobi_eigen_sym(lam, k).values.front();
            if (mineig < -1e-10) break;
        }
        need(mineig < -1e-10, "could not draw an indefinite target matrix");
        CorrelationRepair rep = repair_correlation(lam, k);
        need(rep.adjusted, "repair left an indefinite matrix untouched");
        double fixed = jacobi_eigen_sym(rep.sigma, k).values.front();
        worst_eig = std::min(worst_eig, fixed);
        need(fixed >= -1e-10, "repair case " + std::to_string(c) + ": min eigenvalue " +
                                  num(fixed) + " below -1e-10");
        for (std::size_t i = 0; i < k; ++i)
            need(std::fabs(rep.sigma[i * k + i] - 1.0) <= 1e-12,
                 "repair case " + std::to_string(c) + ": diagonal drifted to " +
                     num(rep.sigma[i * k + i]));
    }
    return "10 sampling cases: worst covariance deviation " + pct(worst_cov_se) +
           " SE (limit 3), worst KS " + pct(100 * worst_ks_ratio) +
           "% of critical; 10 repairs PSD, min eigenvalue " + num(worst_eig);
}

// ---------------------------------------------------------------------------
// Desk-scale end-to-end attack and the ablation echo

const char* kDsRecipe = "synth subjects=40 samples=6 px=32 seed=11 v1";

std::string desk_dataset() {
    return cached("dataset", kDsRecipe, [&](const fs::path& tmp, const fs::path& home) {
        std::string mpath = tst::make_dataset(tmp.string(), 40, 6, 32, 11);
        ImageManifest m = load_manifest(mpath);
        for (auto& e : m.entries)
            e.path = (home / fs::path(e.path).filename()).string();
        save_manifest(mpath, m);
    });
}

std::string desk_extractor(const std::string& ds_dir) {
    std::string recipe = std::string(kDsRecipe) +
                         "|extractor dim=64 widths=16,32,64,64 stage=2 margin=0.2 lr=1e-3 "
                         "batches=400 triplets=32 seed=5 v1";
    return cached("extractor", recipe, [&](const fs::path& tmp, const fs::path&) {
        ImageManifest m = load_manifest(ds_dir + "/manifest.jsonl");
        ExtractorConfig cfg;
        cfg.extractor_id = "desk_e2e";
        cfg.input_size = 32;
        cfg.output_dim = 64;
        cfg.seed = 5;
        train_stand_in_extractor(m, cfg, (tmp / "extractor.ckpt").string(),
                                 (tmp / "log.jsonl").string());
    });
}

std::string desk_gan(const std::string& ds_dir) {
    std::string recipe =
        std::string(kDsRecipe) + "|gan desk32 z=100 bs=16 iters=2000 seed=7 v1";
    return cached("gan", recipe, [&](const fs::path& tmp, const fs::path&) {
        ImageManifest m = load_manifest(ds_dir + "/manifest.jsonl");
        GanConfig cfg = desk_gan_config(32);
        cfg.batch_size = 16;
        cfg.iterations = 2000;
        cfg.checkpoint_every = 1000;
        cfg.seed = 7;
        train_gan<float>(m, cfg, (tmp / "gan.ckpt").string(), (tmp / "log.jsonl").string());
    });
}

TrainConfig desk_train_config() {
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.lr0 = 2e-4;
    cfg.lr_decay = 0.94;
    cfg.lr_decay_every = 5000;
    cfg.phase1_batches = 2000;
    cfg.phase2_batches = 500;
    cfg.checkpoint_every = 500;
    cfg.seed = 101;
    return cfg;
}

// Generator-fed or raw-manifest two-phase training with shared seeds, cached
// on every upstream artifact plus the schedule.
std::string desk_model(NetKind kind, const std::string& src, const std::string& ds_dir,
                       const std::string& ext_dir, const std::string& gan_dir) {
    std::string recipe = std::string(kDsRecipe) + "|extractor v1|gan v1|model arch=" +
                         to_string(kind) + " src=" + src +
                         " bs=16 phases=2000+500 lr=2e-4 seed=101 init=3 mink=1 v1";
    return cached("model_" + to_string(kind) + "_" + src, recipe,
                  [&](const fs::path& tmp, const fs::path&) {
        auto ex = ExtractorHandle<float>::load(ext_dir + "/extractor.ckpt");
        ReconstructionModel<float> model(desk_spec(kind, 32, 64), InitPolicy{3, 0.02});
        TrainConfig cfg = desk_train_config();
        StandInFeatureMap<float> fmap =
            StandInFeatureMap<float>::load(ext_dir + "/extractor.ckpt");
        if (src == "generator") {
            Generator<float> gen = load_generator<float>(gan_dir + "/gan.ckpt");
            TrainingStream<float> stream(&gen, ex, cfg.batch_size, cfg.seed);
            two_phase_train(model, stream, cfg, tmp.string(), &fmap, 1.0);
        } else {
            ImageManifest m = load_manifest(ds_dir + "/manifest.jsonl");
            m.entries.resize(200);
            cfg.data_source = "raw_manifest";
            TrainingStream<float> stream(m, ex, cfg.batch_size, cfg.seed);
            two_phase_train(model, stream, cfg, tmp.string(), &fmap, 1.0);
        }
        model.save((tmp / "model.ckpt").string());
    });
}

double type1_tar(const ImageManifest& manifest, const ExtractorHandle<float>& ex,
                 const ReconstructionModel<float>& model, const std::string& name,
                 std::size_t begin, std::size_t end, double far) {
    EvalFold fold;
    for (std::size_t i = begin; i < end; ++i) fold.image_indices.push_back(i);
    ModelReconstructor<float> rec(model, name);
    ScoreSet s = build_type1_scores(manifest, rec, ex, fold);
    return tar_at_far(s, {far}).rows[0].tar;
}

std::string check_desk_e2e() {
    auto t0 = std::chrono::steady_clock::now();
    std::string ds = desk_dataset();
    std::string ext = desk_extractor(ds);
    std::string gan = desk_gan(ds);
    std::string nbb = desk_model(NetKind::nbnet_b, "generator", ds, ext, gan);
    std::string dcnn = desk_model(NetKind::dcnn, "generator", ds, ext, gan);

    ImageManifest manifest = load_manifest(ds + "/manifest.jsonl");
    auto ex = ExtractorHandle<float>::load(ext + "/extractor.ckpt");
    auto trained_b = ReconstructionModel<float>::load(nbb + "/model.ckpt");
    auto trained_d = ReconstructionModel<float>::load(dcnn + "/model.ckpt");
    ReconstructionModel<float> untrained(desk_spec(NetKind::nbnet_b, 32, 64),
                                         InitPolicy{3, 0.02});

    double tar_b = type1_tar(manifest, ex, trained_b, "nbnet_b", 0, manifest.size(), 0.01);
    double tar_u = type1_tar(manifest, ex, untrained, "untrained", 0, manifest.size(), 0.01);
    double tar_d = type1_tar(manifest, ex, trained_d, "dcnn", 0, manifest.size(), 0.01);
    auto t1 = std::chrono::steady_clock::now();
    long secs = std::chrono::duration_cast<std::chrono::seconds>(t1 - t0).count();

    std::string detail = "type-I TAR @ FAR 1%: trained NbNet-B " + pct(tar_b) +
                         "%, untrained " + pct(tar_u) + "%, trained D-CNN " + pct(tar_d) +
                         "% (" + std::to_string(secs) + " s)";
    need(tar_b >= tar_u + 30.0, detail + "; trained lift " + pct(tar_b - tar_u) + " < 30 points");
    need(tar_b >= tar_d - 5.0,
         detail + "; NbNet-B trails D-CNN by " + pct(tar_d - tar_b) + " > 5 points");
    return detail;
}

std::string check_ablation_echo() {
    auto t0 = std::chrono::steady_clock::now();
    std::string ds = desk_dataset();
    std::string ext = desk_extractor(ds);
    std::string gan = desk_gan(ds);
    std::string gen_dir = desk_model(NetKind::nbnet_b, "generator", ds, ext, gan);
    std::string raw_dir = desk_model(NetKind::nbnet_b, "raw200", ds, ext, gan);

    ImageManifest manifest = load_manifest(ds + "/manifest.jsonl");
    auto ex = ExtractorHandle<float>::load(ext + "/extractor.ckpt");
    auto gen_model = ReconstructionModel<float>::load(gen_dir + "/model.ckpt");
    auto raw_model = ReconstructionModel<float>::load(raw_dir + "/model.ckpt");

    // the raw run trains on entries 0..199, so the echo is scored on the
    // trailing subjects neither run ever saw
    double tar_gen =
        type1_tar(manifest, ex, gen_model, "nbnet_b_gen", 204, manifest.size(), 0.01);
    double tar_raw =
        type1_tar(manifest, ex, raw_model, "nbnet_b_raw", 204, manifest.size(), 0.01);
    auto t1 = std::chrono::steady_clock::now();
    long secs = std::chrono::duration_cast<std::chrono::seconds>(t1 - t0).count();

    std::string detail = "held-out type-I TAR @ FAR 1%: generator-trained " + pct(tar_gen) +
                         "%, raw-200-trained " + pct(tar_raw) + "% (" + std::to_string(secs) +
                         " s)";
    need(tar_gen + 1e-9 >= tar_raw,
         detail + "; generator training trails by " + pct(tar_raw - tar_gen) + " points");
    return detail;
}

}  // namespace

int main(int argc, char** argv) {
    std::map<std::string, std::function<std::string()>> gates = {
        {"param_counts_dcnn", [] { return check_param_count(NetKind::dcnn); }},
        {"param_counts_nbnet_a", [] { return check_param_count(NetKind::nbnet_a); }},
        {"param_counts_nbnet_b", [] { return check_param_count(NetKind::nbnet_b); }},
        {"shape_chain", check_shape_chain},
        {"channel_composition", check_channel_composition},
        {"metric_oracle", check_metric_oracle},
        {"identity_anchors", check_identity_anchors},
        {"gradient_checks", check_gradients},
        {"schedule_determinism", check_schedule_determinism},
        {"norta_suite", check_norta_suite},
        {"desk_e2e", check_desk_e2e},
        {"ablation_echo", check_ablation_echo},
    };
    if (argc != 2 || !gates.count(argv[1])) {
        std::fprintf(stderr, "usage: acceptance <criterion>\ncriteria:\n");
        for (auto& [name, fn] : gates) std::fprintf(stderr, "  %s\n", name.c_str());
        return 2;
    }
    try {
        std::string detail = gates[argv[1]]();
        std::printf("PASS %s: %s\n", argv[1], detail.c_str());
        return 0;
    } catch (const Failed& e) {
        std::printf("FAIL %s: %s\n", argv[1], e.what());
        return 1;
    } catch (const std::exception& e) {
        std::printf("FAIL %s: unexpected error: %s\n", argv[1], e.what());
        return 1;
    }
}
