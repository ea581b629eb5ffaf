#ifndef NBNET_TESTS_HELPERS_HPP
#define NBNET_TESTS_HELPERS_HPP

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nbnet/data.hpp"
#include "nbnet/extractor.hpp"
#include "nbnet/rng.hpp"
#include "nbnet/serialize.hpp"
#include "nbnet/synth.hpp"
#include "nbnet/tensor.hpp"

namespace tst {

namespace fs = std::filesystem;

// Scratch directory that cleans itself up. Every test writing files goes
// through one of these so parallel ctest invocations never collide.
struct TempDir {
    std::string path;

    TempDir() {
        std::string tmpl = (fs::temp_directory_path() / "nbnet_test_XXXXXX").string();
        std::vector<char> buf(tmpl.begin(), tmpl.end());
        buf.push_back('\0');
        if (!mkdtemp(buf.data())) throw std::runtime_error("mkdtemp failed for " + tmpl);
        path = buf.data();
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }

    std::string file(const std::string& name) const { return (fs::path(path) / name).string(); }
};

inline std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void spit(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    f << content;
}

// Labelled face dataset on disk; returns the manifest path.
inline std::string make_dataset(const std::string& dir, int subjects, int samples, int size,
                                std::uint64_t seed = 1) {
    nbnet::SynthSpec spec;
    spec.subjects = subjects;
    spec.samples_per_subject = samples;
    spec.size = size;
    spec.seed = seed;
    return nbnet::write_synth_dataset(dir, spec);
}

// Untrained embedding net wrapped as a loadable extractor checkpoint. Random
// projections still separate identities well enough for protocol tests, and
// building one is instant.
inline std::string forge_extractor(const std::string& path, int input_size, int output_dim,
                                   std::vector<int> widths = {8, 16}, int feature_stage = 1,
                                   std::uint64_t seed = 7,
                                   const std::string& id = "forged-extractor") {
    nbnet::StandInNet<float> net(input_size, output_dim, std::move(widths), feature_stage);
    nbnet::Rng rng(nbnet::mix_seed(seed, 0x0e17a5ull));
    net.init(rng);
    nbnet::CheckpointWriter w(path, "NBXT", 1);
    w.add_text("extractor_id", id);
    net.save_into(w);
    w.finish();
    return path;
}

// Threshold rule done the slow, obvious way: walk every impostor score as a
// candidate, count >= by brute force, keep the smallest candidate whose
// false-accept fraction stays within the target. Returns {threshold, tar
// percent}; found=false when no candidate qualifies.
struct OracleTarFar {
    bool found = false;
    double threshold = 0;
    double tar = 0;
};

inline OracleTarFar oracle_tar_at_far(const std::vector<double>& genuine,
                                      const std::vector<double>& impostor, double far) {
    OracleTarFar out;
    double best = 0;
    for (double cand : impostor) {
        std::size_t hits = 0;
        for (double s : impostor)
            if (s >= cand) ++hits;
        if (double(hits) / double(impostor.size()) <= far && (!out.found || cand < best)) {
            out.found = true;
            best = cand;
        }
    }
    if (!out.found) return out;
    out.threshold = best;
    std::size_t acc = 0;
    for (double s : genuine)
        if (s >= best) ++acc;
    out.tar = 100.0 * double(acc) / double(genuine.size());
    return out;
}

// Rank-1 by exhaustive cosine against every gallery row; ties to the lowest
// index, matching the documented convention.
inline double oracle_rank1(const std::vector<std::vector<double>>& gallery,
                           const std::vector<std::string>& gallery_subjects,
                           const std::vector<std::vector<double>>& probes,
                           const std::vector<std::string>& probe_subjects) {
    std::size_t correct = 0;
    for (std::size_t p = 0; p < probes.size(); ++p) {
        std::size_t arg = 0;
        double best = -2;
        for (std::size_t g = 0; g < gallery.size(); ++g) {
            double dot = 0, na = 0, nb = 0;
            for (std::size_t i = 0; i < probes[p].size(); ++i) {
                dot += probes[p][i] * gallery[g][i];
                na += probes[p][i] * probes[p][i];
                nb += gallery[g][i] * gallery[g][i];
            }
            double s = dot / (std::sqrt(na) * std::sqrt(nb));
            if (s > best) {
                best = s;
                arg = g;
            }
        }
        if (gallery_subjects[arg] == probe_subjects[p]) ++correct;
    }
    return 100.0 * double(correct) / double(probes.size());
}

#ifdef NBNET_CLI_PATH
struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

// Runs the built binary through the shell. env is a prefix like
// "NBNET_OUTPUT_ROOT=/tmp/x " and must end with a space when non-empty.
inline CliResult run_cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    std::string base = (fs::temp_directory_path() /
                        ("nbnet_cli_" + std::to_string(getpid()) + "_" +
                         std::to_string(counter++)))
                           .string();
    std::string cmd = env + std::string(NBNET_CLI_PATH) + " " + args + " >" + base + ".out 2>" +
                      base + ".err";
    int rc = std::system(cmd.c_str());
    CliResult res;
    res.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    res.out = slurp(base + ".out");
    res.err = slurp(base + ".err");
    fs::remove(base + ".out");
    fs::remove(base + ".err");
    return res;
}
#endif

// Central finite difference of a scalar functional with respect to one slot
// of a float tensor, computed in double via the functional itself.
template <class F>
double central_diff(nbnet::Tensor<float>& t, std::size_t i, double h, F&& f) {
    float keep = t.v[i];
    t.v[i] = float(double(keep) + h);
    double up = f();
    t.v[i] = float(double(keep) - h);
    double down = f();
    t.v[i] = keep;
    return (up - down) / (2 * h);
}

inline double rel_err(double got, double want) {
    double denom = std::max(std::fabs(got), std::fabs(want));
    if (denom < 1e-12) return 0;
    return std::fabs(got - want) / denom;
}

}  // namespace tst

#endif
