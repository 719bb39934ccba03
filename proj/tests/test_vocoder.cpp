#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "nautilus/errors.hpp"
#include "nautilus/optim.hpp"
#include "nautilus/vocoder.hpp"
#include "test_util.hpp"

using namespace nautilus;
using test::random_mat;

namespace {

Vocoder tiny_vocoder(std::uint64_t seed = 42) {
  return Vocoder::init(test::tiny_manifest(), {"sa", "sb"}, seed);
}

MelMatrix random_mel(Rng& rng, int frames, int dim) {
  MelMatrix mel;
  mel.values = random_mat(rng, frames, dim);
  return mel;
}

WaveCodes random_codes(Rng& rng, int n, int q) {
  WaveCodes c;
  c.quantization = static_cast<std::uint32_t>(q);
  c.codes.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    c.codes.push_back(static_cast<std::uint16_t>(rng.uniform_int(q)));
  return c;
}

UtteranceRecord make_record(Rng& rng, const ArchManifest& arch, int frames,
                            const std::string& id) {
  UtteranceRecord rec;
  rec.utterance_id = id;
  rec.speaker_id = "sa";
  rec.mel = random_mel(rng, frames, arch.mel_dim);
  rec.waveform = random_codes(rng, frames * arch.samples_per_frame, arch.quantization);
  return rec;
}

}  // namespace

TEST_CASE("posterior rows are distributions") {
  Vocoder v = tiny_vocoder();
  Rng rng(1);
  MelMatrix mel = random_mel(rng, 6, 5);
  WaveCodes codes = random_codes(rng, 18, 8);
  Mat p = vocoder_forward(v, codes, mel, 0);
  CHECK(p.rows() == 18);
  CHECK(p.cols() == 8);
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-6);
  CHECK((p.array() > 0.0).all());
}

TEST_CASE("forward validates inputs") {
  Vocoder v = tiny_vocoder();
  Rng rng(2);
  MelMatrix mel = random_mel(rng, 6, 5);
  WaveCodes codes = random_codes(rng, 18, 8);
  WaveCodes short_codes = codes;
  short_codes.codes.pop_back();
  CHECK_THROWS_AS(vocoder_forward(v, short_codes, mel, 0), ModelError);
  MelMatrix wide = random_mel(rng, 6, 7);
  CHECK_THROWS_AS(vocoder_forward(v, codes, wide, 0), ModelError);
  CHECK_THROWS_AS(vocoder_forward(v, codes, mel, 5), ModelError);
}

TEST_CASE("sample-level causality at random positions") {
  Vocoder v = tiny_vocoder();
  Rng rng(3);
  const int frames = 8;
  MelMatrix mel = random_mel(rng, frames, 5);
  WaveCodes codes = random_codes(rng, frames * 3, 8);
  Mat base = vocoder_forward(v, codes, mel, 1);
  for (int probe = 0; probe < 20; ++probe) {
    const int n = rng.uniform_int(static_cast<int>(codes.codes.size()));
    WaveCodes bumped = codes;
    bumped.codes[static_cast<std::size_t>(n)] =
        static_cast<std::uint16_t>((bumped.codes[static_cast<std::size_t>(n)] + 1) % 8);
    Mat out = vocoder_forward(v, bumped, mel, 1);
    CHECK(out.topRows(n + 1) == base.topRows(n + 1));
    if (n + 1 < out.rows())
      CHECK((out.row(n + 1) - base.row(n + 1)).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("each mel frame conditions exactly its own samples") {
  Vocoder v = tiny_vocoder();
  Rng rng(4);
  const int frames = 6;
  const int spf = v.arch.samples_per_frame;
  MelMatrix mel = random_mel(rng, frames, 5);
  WaveCodes codes = random_codes(rng, frames * spf, 8);
  Mat base = vocoder_forward(v, codes, mel, kNoSpeaker);
  for (int f : {0, 2, 5}) {
    MelMatrix bumped = mel;
    bumped.values.row(f).array() += 0.5;
    Mat out = vocoder_forward(v, codes, bumped, kNoSpeaker);
    // Samples strictly before the frame's window never see the change.
    CHECK(out.topRows(f * spf) == base.topRows(f * spf));
    // The first conditioned sample does.
    CHECK((out.row(f * spf) - base.row(f * spf)).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("no-speaker mode equals a zero-bias speaker") {
  Vocoder v = tiny_vocoder();
  Rng rng(5);
  MelMatrix mel = random_mel(rng, 5, 5);
  WaveCodes codes = random_codes(rng, 15, 8);
  // Fresh init keeps speaker biases at zero.
  Mat none = vocoder_forward(v, codes, mel, kNoSpeaker);
  Mat zero_bias = vocoder_forward(v, codes, mel, 0);
  CHECK(none == zero_bias);

  for (auto& [name, mat] : v.params.values)
    if (name.find(".bf") != std::string::npos || name.find(".bg") != std::string::npos)
      mat = random_mat(rng, static_cast<int>(mat.rows()), static_cast<int>(mat.cols()), 0.4);
  Mat biased = vocoder_forward(v, codes, mel, 0);
  CHECK((biased - none).cwiseAbs().maxCoeff() > 0.0);
  Mat other = vocoder_forward(v, codes, mel, 1);
  CHECK((biased - other).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("loss_voc hand values") {
  Mat uniform = Mat::Constant(4, 8, 1.0 / 8.0);
  WaveCodes codes;
  codes.quantization = 8;
  codes.codes = {0, 3, 7, 2};
  CHECK(loss_voc(uniform, codes) == doctest::Approx(std::log(8.0)).epsilon(1e-12));

  Mat big = Mat::Constant(2, 1024, 1.0 / 1024.0);
  WaveCodes big_codes;
  big_codes.quantization = 1024;
  big_codes.codes = {5, 900};
  CHECK(loss_voc(big, big_codes) == doctest::Approx(std::log(1024.0)).epsilon(1e-12));
  CHECK(std::log(1024.0) == doctest::Approx(6.9315).epsilon(1e-4));

  Mat onehot = Mat::Zero(2, 8);
  onehot(0, 1) = 1.0;
  onehot(1, 4) = 1.0;
  WaveCodes oh;
  oh.quantization = 8;
  oh.codes = {1, 4};
  CHECK(loss_voc(onehot, oh) == 0.0);
}

TEST_CASE("generation length, determinism, and self-consistency") {
  Vocoder v = tiny_vocoder();
  Rng rng(6);
  MelMatrix mel = random_mel(rng, 7, 5);
  const int spf = v.arch.samples_per_frame;

  WaveCodes a = vocoder_generate(v, mel, 0, 11, GenMode::kArgmax);
  CHECK(static_cast<int>(a.codes.size()) == 7 * spf);
  CHECK(static_cast<int>(a.quantization) == v.arch.quantization);
  WaveCodes b = vocoder_generate(v, mel, 0, 999, GenMode::kArgmax);
  CHECK(a.codes == b.codes);  // argmax ignores the seed

  WaveCodes s1 = vocoder_generate(v, mel, 0, 11, GenMode::kSample);
  WaveCodes s2 = vocoder_generate(v, mel, 0, 11, GenMode::kSample);
  CHECK(s1.codes == s2.codes);
  WaveCodes s3 = vocoder_generate(v, mel, 0, 12, GenMode::kSample);
  CHECK(s1.codes != s3.codes);

  // Teacher-forcing the generated trajectory reproduces its posteriors, and
  // the argmax of each teacher-forced row reproduces the argmax trajectory.
  Mat p = vocoder_forward(v, a, mel, 0);
  for (Eigen::Index n = 0; n < p.rows(); ++n) {
    Eigen::Index best = 0;
    p.row(n).maxCoeff(&best);
    CHECK(static_cast<int>(best) == static_cast<int>(a.codes[static_cast<std::size_t>(n)]));
  }
}

TEST_CASE("incremental generation matches the teacher-forced graph") {
  Vocoder v = tiny_vocoder();
  Rng rng(7);
  MelMatrix mel = random_mel(rng, 6, 5);
  WaveCodes gen = vocoder_generate(v, mel, 1, 5, GenMode::kSample);
  Mat p = vocoder_forward(v, gen, mel, 1);

  // Replay the sampling decisions against the teacher-forced posteriors.
  Rng replay = Rng::stream(5, "voc.generate");
  for (Eigen::Index n = 0; n < p.rows(); ++n) {
    const double u = replay.uniform();
    double acc = 0.0;
    int code = static_cast<int>(p.cols()) - 1;
    for (Eigen::Index q = 0; q < p.cols(); ++q) {
      acc += p(n, q);
      if (u < acc) {
        code = static_cast<int>(q);
        break;
      }
    }
    CHECK(code == static_cast<int>(gen.codes[static_cast<std::size_t>(n)]));
  }
}

TEST_CASE("vocoder gradients match finite differences") {
  ArchManifest arch = test::tiny_manifest();
  Vocoder v = Vocoder::init(arch, {"sa", "sb"}, 7);
  Rng rng(8);
  const int frames = 3;
  const int n = frames * arch.samples_per_frame;
  Mat mel = random_mat(rng, frames, 5);
  std::vector<int> prev_ids(static_cast<std::size_t>(n));
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::vector<int> frame_map(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    prev_ids[static_cast<std::size_t>(i)] = i == 0 ? -1 : rng.uniform_int(8);
    labels[static_cast<std::size_t>(i)] = rng.uniform_int(8);
    frame_map[static_cast<std::size_t>(i)] = i / arch.samples_per_frame;
  }
  // Nonzero speaker biases so their gradients are exercised too.
  for (auto& [name, mat] : v.params.values)
    if (name.find(".bf") != std::string::npos || name.find(".bg") != std::string::npos)
      mat = random_mat(rng, static_cast<int>(mat.rows()), static_cast<int>(mat.cols()), 0.3);

  auto res = test::gradcheck_params(v.params.values, [&](ad::ParamGraph& pg) {
    return ad::ce_rows(graph::voc(pg, arch, prev_ids, ad::constant(mel), frame_map, 1),
                       labels);
  });
  CAPTURE(res.where);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("adaptation removes biases and fits a single utterance") {
  ArchManifest arch = test::tiny_manifest();
  Vocoder v = Vocoder::init(arch, {"sa", "sb"}, 9);
  Rng rng(10);
  std::vector<UtteranceRecord> slice = {make_record(rng, arch, 12, "u000")};

  VocoderTrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 3;
  Vocoder zero = v;
  auto no_curves = adapt_vocoder(zero, slice, cfg);
  CHECK(no_curves.empty());
  CHECK((zero.params.flags & kStageAdaptedVocoder) != 0);
  std::set<std::string> expected;
  for (const auto& [name, mat] : v.params.values)
    if (name.find(".bf") == std::string::npos && name.find(".bg") == std::string::npos)
      expected.insert(name);
  std::set<std::string> got;
  for (const auto& [name, mat] : zero.params.values) {
    got.insert(name);
    CHECK(mat == v.params.values.at(name));
  }
  CHECK(got == expected);

  cfg.epochs = 40;
  cfg.learning_rate = 5e-3;
  auto curves = adapt_vocoder(v, slice, cfg);
  REQUIRE(curves.size() == 40);
  for (const auto& r : curves) CHECK(r.has("voc"));

  // Spearman rank correlation between epoch index and loss is negative.
  std::vector<double> losses;
  for (const auto& r : curves) losses.push_back(r.at("voc"));
  std::vector<int> rank(losses.size());
  std::iota(rank.begin(), rank.end(), 0);
  std::sort(rank.begin(), rank.end(),
            [&](int a, int b) { return losses[static_cast<std::size_t>(a)] < losses[static_cast<std::size_t>(b)]; });
  std::vector<double> r_of(losses.size());
  for (std::size_t i = 0; i < rank.size(); ++i)
    r_of[static_cast<std::size_t>(rank[i])] = static_cast<double>(i);
  const double m = static_cast<double>(losses.size() - 1) / 2.0;
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const double x = static_cast<double>(i) - m;
    const double y = r_of[i] - m;
    num += x * y;
    da += x * x;
    db += y * y;
  }
  const double spearman = num / std::sqrt(da * db);
  CAPTURE(spearman);
  CHECK(spearman < 0.0);
  CHECK(curves.back().at("voc") < curves.front().at("voc"));

  CHECK_THROWS_AS(adapt_vocoder(v, {}, cfg), DataError);
}

TEST_CASE("adaptation is deterministic in the seed") {
  ArchManifest arch = test::tiny_manifest();
  Rng rng(11);
  std::vector<UtteranceRecord> slice = {make_record(rng, arch, 10, "u000"),
                                        make_record(rng, arch, 9, "u001")};
  VocoderTrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 77;
  Vocoder a = Vocoder::init(arch, {"sa", "sb"}, 9);
  Vocoder b = Vocoder::init(arch, {"sa", "sb"}, 9);
  auto ca = adapt_vocoder(a, slice, cfg);
  auto cb = adapt_vocoder(b, slice, cfg);
  REQUIRE(ca.size() == cb.size());
  for (std::size_t i = 0; i < ca.size(); ++i) CHECK(ca[i].line() == cb[i].line());
  CHECK(network_hash(a.params, "voc.") == network_hash(b.params, "voc."));
}

TEST_CASE("epoch plans are deterministic and crop within bounds") {
  std::vector<int> frames = {20, 5, 17, 8};
  auto p1 = voc_epoch_plan(9, 4, frames, 8);
  auto p2 = voc_epoch_plan(9, 4, frames, 8);
  REQUIRE(p1.size() == 4);
  std::set<int> seen;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].record == p2[i].record);
    CHECK(p1[i].start_frame == p2[i].start_frame);
    seen.insert(p1[i].record);
    const int total = frames[static_cast<std::size_t>(p1[i].record)];
    CHECK(p1[i].frames == std::min(total, 8));
    CHECK(p1[i].start_frame >= 0);
    CHECK(p1[i].start_frame + p1[i].frames <= total);
  }
  CHECK(seen.size() == 4);
  auto p3 = voc_epoch_plan(9, 5, frames, 8);
  bool differs = false;
  for (std::size_t i = 0; i < p1.size(); ++i)
    if (p3[i].record != p1[i].record || p3[i].start_frame != p1[i].start_frame)
      differs = true;
  CHECK(differs);
}

TEST_CASE("adam steps and float-rounds parameters") {
  std::map<std::string, Mat> params;
  params["w"] = Mat::Constant(1, 2, 1.0);
  std::map<std::string, Mat> grads;
  grads["w"] = Mat::Constant(1, 2, 0.5);
  Adam adam(AdamConfig{0.01});
  adam.step(params, grads);
  // First Adam step moves by lr * g / (|g| + eps) regardless of magnitude.
  CHECK(params.at("w")(0, 0) == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(params.at("w")(0, 0) == f32(params.at("w")(0, 0)));
  CHECK(adam.steps_taken() == 1);

  std::map<std::string, Mat> bad;
  bad["nope"] = Mat::Zero(1, 2);
  CHECK_THROWS_AS(adam.step(params, bad), ModelError);
}
