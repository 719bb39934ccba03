#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "nautilus/errors.hpp"
#include "nautilus/features.hpp"
#include "nautilus/rng.hpp"
#include "test_util.hpp"

using namespace nautilus;

namespace {

FeatureConfig toy_config() {
  FeatureConfig cfg;
  cfg.sample_rate = 4000;
  cfg.window_ms = 50.0;
  cfg.shift_ms = 12.5;
  cfg.mel_dim = 16;
  cfg.bits = 8;
  return cfg;
}

// Center frequency of mel filter j on the uniform mel grid used by
// mel_extract: D+2 edge points over [0, nyquist].
double filter_center_hz(const FeatureConfig& cfg, int j) {
  const double nyquist = cfg.sample_rate / 2.0;
  const double mel_hi = 2595.0 * std::log10(1.0 + nyquist / 700.0);
  const double mel = mel_hi * (j + 1) / (cfg.mel_dim + 1);
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

double companded(double x, int q) {
  const double mu = q - 1;
  return (x < 0 ? -1.0 : 1.0) * std::log1p(mu * std::abs(x)) / std::log1p(mu);
}

}  // namespace

TEST_CASE("mel_extract zero waveform gives log floor everywhere") {
  FeatureConfig cfg = toy_config();
  std::vector<double> wave(600, 0.0);  // three windows
  MelMatrix mel = mel_extract(wave, cfg);
  CHECK(mel.dim() == 16);
  const double expect = f32(std::log(cfg.mel_floor));
  CHECK((mel.values.array() - expect).abs().maxCoeff() == 0.0);
}

TEST_CASE("mel_extract frame count tracks shift-divisible length") {
  FeatureConfig cfg = toy_config();
  const int spf = cfg.samples_per_frame();
  CHECK(spf == 50);
  for (int t : {4, 7, 20}) {
    std::vector<double> wave(static_cast<std::size_t>(t) * spf, 0.1);
    MelMatrix mel = mel_extract(wave, cfg);
    CHECK(mel.frames() == t);
  }
}

TEST_CASE("mel_extract rejects sub-window input") {
  FeatureConfig cfg = toy_config();
  std::vector<double> wave(cfg.window_samples() - 1, 0.0);
  CHECK_THROWS_AS(mel_extract(wave, cfg), DataError);
}

TEST_CASE("pure tone at filter center peaks in that filter") {
  FeatureConfig cfg = toy_config();
  for (int j = 1; j < cfg.mel_dim - 1; ++j) {
    const double f = filter_center_hz(cfg, j);
    std::vector<double> wave(1000);
    for (std::size_t n = 0; n < wave.size(); ++n)
      wave[n] = 0.8 * std::sin(2.0 * M_PI * f * n / cfg.sample_rate);
    MelMatrix mel = mel_extract(wave, cfg);
    // Skip trailing frames that analyze mostly zero padding.
    for (int t = 0; t + 4 < mel.frames(); ++t) {
      int argmax = 0;
      mel.values.row(t).maxCoeff(&argmax);
      CHECK(argmax == j);
    }
  }
}

TEST_CASE("mel_extract is deterministic") {
  FeatureConfig cfg = toy_config();
  Rng rng(77);
  std::vector<double> wave(500);
  for (auto& v : wave) v = 0.5 * rng.normal();
  MelMatrix a = mel_extract(wave, cfg);
  MelMatrix b = mel_extract(wave, cfg);
  CHECK(a.values == b.values);
}

TEST_CASE("mu_law encode endpoints at 10 bits") {
  std::vector<double> xs{0.0, 1.0, -1.0};
  WaveCodes wc = mu_law_encode(xs, 10, 4000);
  CHECK(wc.quantization == 1024);
  CHECK(wc.codes[0] == 512);
  CHECK(wc.codes[1] == 1023);
  CHECK(wc.codes[2] == 0);
}

TEST_CASE("mu_law decode of midpoint code is within one cell of zero") {
  WaveCodes wc;
  wc.quantization = 1024;
  wc.codes = {512};
  const double v = mu_law_decode(wc)[0];
  CHECK(std::abs(companded(v, 1024)) <= 2.0 / 1024.0);
}

TEST_CASE("mu_law decode endpoints approach plus minus one") {
  WaveCodes wc;
  wc.quantization = 1024;
  wc.codes = {0, 1023};
  auto v = mu_law_decode(wc);
  CHECK(companded(v[0], 1024) <= -1.0 + 2.0 / 1024.0);
  CHECK(companded(v[1], 1024) >= 1.0 - 2.0 / 1024.0);
}

TEST_CASE("mu_law roundtrip bound on sinusoid and random samples") {
  for (int bits : {8, 10}) {
    const int q = 1 << bits;
    std::vector<double> xs;
    for (int n = 0; n < 2000; ++n)
      xs.push_back(0.99 * std::sin(2.0 * M_PI * 1000.0 * n / 4000.0));
    Rng rng(5);
    for (int n = 0; n < 10000; ++n) xs.push_back(rng.uniform(-1.0, 1.0));
    WaveCodes wc = mu_law_encode(xs, bits, 4000);
    std::vector<double> back = mu_law_decode(wc);
    double worst = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i)
      worst = std::max(worst, std::abs(companded(back[i], q) - companded(xs[i], q)));
    CHECK(worst <= 2.0 / (q - 1));
  }
}

TEST_CASE("mu_law rejects out-of-range input") {
  CHECK_THROWS_AS(mu_law_encode({1.5}, 8, 4000), DataError);
  CHECK_THROWS_AS(mu_law_encode({0.0}, 1, 4000), ConfigError);
  WaveCodes wc;
  wc.quantization = 16;
  wc.codes = {16};
  CHECK_THROWS_AS(mu_law_decode(wc), DataError);
}

TEST_CASE("upsample_transcript definition") {
  PhonemeTranscript t;
  t.ids = {4, 7};
  t.durations = {2, 3};
  CHECK(upsample_transcript(t) == std::vector<int>{4, 4, 7, 7, 7});
  PhonemeTranscript single;
  single.ids = {3};
  single.durations = {1};
  CHECK(upsample_transcript(single) == std::vector<int>{3});
}

TEST_CASE("upsample_transcript inverts to run-length encoding") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    PhonemeTranscript t;
    const int n = 1 + static_cast<int>(rng.uniform_int(9));
    int prev = -1;
    for (int i = 0; i < n; ++i) {
      int id = static_cast<int>(rng.uniform_int(6));
      while (id == prev) id = static_cast<int>(rng.uniform_int(6));
      prev = id;
      t.ids.push_back(id);
      t.durations.push_back(1 + static_cast<int>(rng.uniform_int(5)));
    }
    std::vector<int> labels = upsample_transcript(t);
    CHECK(static_cast<int>(labels.size()) == t.total_frames());
    PhonemeTranscript rle;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (rle.ids.empty() || rle.ids.back() != labels[i]) {
        rle.ids.push_back(labels[i]);
        rle.durations.push_back(1);
      } else {
        ++rle.durations.back();
      }
    }
    CHECK(rle.ids == t.ids);
    CHECK(rle.durations == t.durations);
  }
}

TEST_CASE("toy corpus is deterministic and internally consistent") {
  ToyCorpusSpec spec = ToyCorpusSpec::desk(2, 3);
  Corpus a = generate_toy_corpus(spec, 123);
  Corpus b = generate_toy_corpus(spec, 123);
  REQUIRE(a.records.size() == 6);
  REQUIRE(b.records.size() == 6);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].mel.values == b.records[i].mel.values);
    CHECK(a.records[i].waveform.codes == b.records[i].waveform.codes);
  }

  for (const auto& rec : a.records) {
    REQUIRE(rec.transcript.has_value());
    CHECK(rec.transcript->total_frames() == rec.mel.frames());
    CHECK(rec.waveform.codes.size() ==
          static_cast<std::size_t>(rec.mel.frames()) * 50);
    MelMatrix again = mel_extract(mu_law_decode(rec.waveform), spec.feature);
    CHECK(again.values == rec.mel.values);
  }
}

TEST_CASE("parallel speakers share labels but differ in mel") {
  ToyCorpusSpec spec = ToyCorpusSpec::desk(2, 2);
  Corpus c = generate_toy_corpus(spec, 7);
  const auto& r0 = c.records[0];
  const auto& r1 = c.records[1];
  REQUIRE(r0.utterance_id == r1.utterance_id);
  REQUIRE(r0.speaker_id != r1.speaker_id);
  CHECK(upsample_transcript(*r0.transcript) == upsample_transcript(*r1.transcript));
  CHECK((r0.mel.values - r1.mel.values).cwiseAbs().maxCoeff() > 0.1);
}

TEST_CASE("different seeds give different corpora") {
  ToyCorpusSpec spec = ToyCorpusSpec::desk(1, 2);
  Corpus a = generate_toy_corpus(spec, 1);
  Corpus b = generate_toy_corpus(spec, 2);
  bool differ = a.records[0].waveform.codes != b.records[0].waveform.codes ||
                a.records[0].mel.frames() != b.records[0].mel.frames();
  CHECK(differ);
}

TEST_CASE("toy corpus rejects inconsistent specs") {
  ToyCorpusSpec none = ToyCorpusSpec::desk(0, 2);
  CHECK_THROWS_AS(generate_toy_corpus(none, 1), ConfigError);
  ToyCorpusSpec nophones = ToyCorpusSpec::desk(1, 2);
  nophones.phoneme_count = 0;
  CHECK_THROWS_AS(generate_toy_corpus(nophones, 1), ConfigError);
}

TEST_CASE("corpus roundtrips through disk") {
  test::TempDir tmp("corpus");
  ToyCorpusSpec spec = ToyCorpusSpec::desk(2, 3);
  Corpus a = generate_toy_corpus(spec, 99);
  save_corpus(a, tmp.str("corpus"));
  Corpus b = load_corpus(tmp.str("corpus"));
  CHECK(b.phonemes == a.phonemes);
  REQUIRE(b.records.size() == a.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& x = a.records[i];
    const auto& y = b.records[i];
    CHECK(y.utterance_id == x.utterance_id);
    CHECK(y.speaker_id == x.speaker_id);
    CHECK(y.mel.values == x.mel.values);
    CHECK(y.mel.frame_shift_ms == x.mel.frame_shift_ms);
    CHECK(y.mel.window_ms == x.mel.window_ms);
    CHECK(y.waveform.codes == x.waveform.codes);
    CHECK(y.waveform.quantization == x.waveform.quantization);
    CHECK(y.waveform.sample_rate == x.waveform.sample_rate);
    REQUIRE(y.transcript.has_value());
    CHECK(y.transcript->ids == x.transcript->ids);
    CHECK(y.transcript->durations == x.transcript->durations);
  }
}

TEST_CASE("load_corpus of empty directory is empty") {
  test::TempDir tmp("empty");
  Corpus c = load_corpus(tmp.str("nothing"));
  CHECK(c.records.empty());
  std::filesystem::create_directories(tmp.str("bare"));
  Corpus d = load_corpus(tmp.str("bare"));
  CHECK(d.records.empty());
}

TEST_CASE("load_corpus validates alignment totals") {
  test::TempDir tmp("badlab");
  ToyCorpusSpec spec = ToyCorpusSpec::desk(1, 1);
  Corpus a = generate_toy_corpus(spec, 4);
  save_corpus(a, tmp.str("c"));
  const auto& rec = a.records[0];
  std::ofstream lab(tmp.str("c") + "/" + rec.speaker_id + "/" + rec.utterance_id + ".lab");
  lab << a.phonemes[0] << " 0 1\n";
  lab.close();
  CHECK_THROWS_AS(load_corpus(tmp.str("c")), DataError);
}

TEST_CASE("load_corpus reports missing companion codes") {
  test::TempDir tmp("nocodes");
  ToyCorpusSpec spec = ToyCorpusSpec::desk(1, 1);
  Corpus a = generate_toy_corpus(spec, 4);
  save_corpus(a, tmp.str("c"));
  const auto& rec = a.records[0];
  std::filesystem::remove(tmp.str("c") + "/" + rec.speaker_id + "/" + rec.utterance_id +
                          ".wav.codes");
  CHECK_THROWS_AS(load_corpus(tmp.str("c")), DataError);
}

TEST_CASE("load_corpus rejects malformed alignment lines") {
  test::TempDir tmp("garbled");
  ToyCorpusSpec spec = ToyCorpusSpec::desk(1, 1);
  Corpus a = generate_toy_corpus(spec, 4);
  save_corpus(a, tmp.str("c"));
  const auto& rec = a.records[0];
  std::ofstream lab(tmp.str("c") + "/" + rec.speaker_id + "/" + rec.utterance_id + ".lab");
  lab << "p00 zero five\n";
  lab.close();
  CHECK_THROWS_AS(load_corpus(tmp.str("c")), DataError);
}

TEST_CASE("records come back in lexicographic order") {
  test::TempDir tmp("order");
  ToyCorpusSpec spec = ToyCorpusSpec::desk(3, 4);
  save_corpus(generate_toy_corpus(spec, 11), tmp.str("c"));
  Corpus c = load_corpus(tmp.str("c"));
  for (std::size_t i = 1; i < c.records.size(); ++i) {
    const auto& prev = c.records[i - 1];
    const auto& cur = c.records[i];
    const bool ordered = prev.utterance_id < cur.utterance_id ||
                         (prev.utterance_id == cur.utterance_id &&
                          prev.speaker_id < cur.speaker_id);
    CHECK(ordered);
  }
}
