#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "nautilus/autodiff.hpp"
#include "nautilus/features.hpp"
#include "nautilus/manifest.hpp"
#include "nautilus/rng.hpp"
#include "nautilus/util.hpp"

namespace nautilus::test {

// Small enough for exhaustive finite-difference sweeps.
inline ArchManifest tiny_manifest() {
  ArchManifest::DeskOptions opt;
  opt.channels = 6;
  opt.latent = 4;
  opt.voc_channels = 4;
  opt.voc_layers = 2;
  opt.quantization = 8;
  opt.samples_per_frame = 3;
  ArchManifest m = ArchManifest::desk(7, 2, 5, opt);
  std::vector<LayerSpec> kept;
  for (const auto& l : m.layers) {
    const bool extra_depth = l.name == "tenc.lat2" || l.name == "tenc.lat3" ||
                             l.name == "tenc.lat4" || l.name == "tenc.lat5" ||
                             l.name == "senc.fg2" || l.name == "senc.fg3" ||
                             l.name == "senc.fg4" || l.name == "senc.fg5" ||
                             l.name == "sdec.ctx2" || l.name == "sdec.ctx3" ||
                             l.name == "sdec.ctx4" || l.name == "sdec.ctx5" ||
                             l.name == "tdec.fg1";
    if (!extra_depth) kept.push_back(l);
  }
  m.layers = kept;
  m.validate();
  return m;
}

inline Mat random_mat(Rng& rng, int rows, int cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

// Parallel corpus matched to the tiny architecture: one transcript per
// utterance shared by all speakers, a learnable per-speaker mel pattern,
// random codes.
inline Corpus tiny_corpus(int speakers, int utts_per_speaker,
                          std::uint64_t seed = 100) {
  ArchManifest arch = tiny_manifest();
  Corpus c;
  for (int p = 0; p < arch.phonemes; ++p) c.phonemes.push_back("p" + std::to_string(p));
  Rng rng(seed);
  std::vector<PhonemeTranscript> scripts;
  for (int u = 0; u < utts_per_speaker; ++u) {
    PhonemeTranscript t;
    const int phones = 2 + rng.uniform_int(3);
    for (int i = 0; i < phones; ++i) {
      t.ids.push_back(rng.uniform_int(arch.phonemes));
      t.durations.push_back(2 + rng.uniform_int(3));
    }
    scripts.push_back(t);
  }
  for (int s = 0; s < speakers; ++s) {
    for (int u = 0; u < utts_per_speaker; ++u) {
      UtteranceRecord rec;
      rec.speaker_id = "spk" + std::to_string(s);
      char buf[16];
      std::snprintf(buf, sizeof buf, "u%03d", u);
      rec.utterance_id = buf;
      rec.transcript = scripts[static_cast<std::size_t>(u)];
      const int frames = rec.transcript->total_frames();
      const auto labels = upsample_transcript(*rec.transcript);
      Mat mel(frames, arch.mel_dim);
      for (int t = 0; t < frames; ++t)
        for (int d = 0; d < arch.mel_dim; ++d)
          mel(t, d) = std::sin(0.7 * labels[static_cast<std::size_t>(t)] + 1.3 * d) +
                      0.3 * s + 0.05 * rng.normal();
      rec.mel.values = mel;
      rec.waveform.quantization = static_cast<std::uint32_t>(arch.quantization);
      rec.waveform.sample_rate = 240;
      for (int n = 0; n < frames * arch.samples_per_frame; ++n)
        rec.waveform.codes.push_back(
            static_cast<std::uint16_t>(rng.uniform_int(arch.quantization)));
      c.records.push_back(rec);
    }
  }
  return c;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string where;
};

// Central finite differences against analytic gradients for a scalar-valued
// graph builder. Inputs are perturbed one entry at a time with step h.
inline GradCheckResult gradcheck(
    const std::function<ad::Var(const std::vector<ad::Var>&)>& build,
    std::vector<Mat> inputs, double h = 1e-4) {
  using ad::Var;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (auto& m : inputs) leaves.push_back(ad::leaf(m, true));
  Var root = build(leaves);
  ad::backward(root);

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Mat analytic = leaves[k]->grad;
    if (analytic.size() == 0) analytic = Mat::Zero(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < inputs[k].rows(); ++i) {
      for (Eigen::Index j = 0; j < inputs[k].cols(); ++j) {
        std::vector<Var> plus, minus;
        for (std::size_t q = 0; q < inputs.size(); ++q) {
          Mat mp = inputs[q];
          Mat mm = inputs[q];
          if (q == k) {
            mp(i, j) += h;
            mm(i, j) -= h;
          }
          plus.push_back(ad::leaf(mp, false));
          minus.push_back(ad::leaf(mm, false));
        }
        const double fp = ad::scalar(build(plus));
        const double fm = ad::scalar(build(minus));
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic(i, j);
        const double denom = std::max(std::max(std::abs(a), std::abs(numeric)), 1e-3);
        const double rel = std::abs(a - numeric) / denom;
        if (rel > res.max_rel_err) {
          res.max_rel_err = rel;
          char buf[128];
          std::snprintf(buf, sizeof buf, "input %zu entry (%lld,%lld)", k,
                        static_cast<long long>(i), static_cast<long long>(j));
          res.where = buf;
        }
      }
    }
  }
  return res;
}

// Finite-difference check over every entry of every tensor in a parameter
// store. build must construct a scalar root through the given ParamGraph.
inline GradCheckResult gradcheck_params(
    const std::map<std::string, Mat>& values,
    const std::function<ad::Var(ad::ParamGraph&)>& build, double h = 1e-4) {
  ad::ParamGraph pg(values);
  ad::Var root = build(pg);
  ad::backward(root);
  std::map<std::string, Mat> grads = pg.grads();

  GradCheckResult res;
  for (const auto& [name, mat] : values) {
    for (Eigen::Index i = 0; i < mat.rows(); ++i) {
      for (Eigen::Index j = 0; j < mat.cols(); ++j) {
        std::map<std::string, Mat> plus = values;
        std::map<std::string, Mat> minus = values;
        plus[name](i, j) += h;
        minus[name](i, j) -= h;
        ad::ParamGraph pp(plus, [](const std::string&) { return false; });
        ad::ParamGraph pm(minus, [](const std::string&) { return false; });
        const double numeric = (ad::scalar(build(pp)) - ad::scalar(build(pm))) / (2.0 * h);
        double analytic = 0.0;
        if (auto it = grads.find(name); it != grads.end()) analytic = it->second(i, j);
        const double denom =
            std::max(std::max(std::abs(analytic), std::abs(numeric)), 1e-3);
        const double rel = std::abs(analytic - numeric) / denom;
        if (rel > res.max_rel_err) {
          res.max_rel_err = rel;
          char buf[160];
          std::snprintf(buf, sizeof buf, "%s (%lld,%lld)", name.c_str(),
                        static_cast<long long>(i), static_cast<long long>(j));
          res.where = buf;
        }
      }
    }
  }
  return res;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("nautilus_test_" + tag + "_" + std::to_string(counter++) + "_" +
             std::to_string(static_cast<long long>(::getpid())));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& rel) const { return (path_ / rel).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace nautilus::test
