#include "nautilus/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "nautilus/errors.hpp"
#include "nautilus/rng.hpp"

namespace fs = std::filesystem;

namespace nautilus {

namespace {

int ms_to_samples(double ms, std::uint32_t sample_rate, const char* what) {
  const double exact = ms * static_cast<double>(sample_rate) / 1000.0;
  const double rounded = std::round(exact);
  if (std::abs(exact - rounded) > 1e-9 || rounded < 1.0)
    throw ConfigError(std::string(what) + " does not map to a whole sample count");
  return static_cast<int>(rounded);
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

int FeatureConfig::window_samples() const {
  return ms_to_samples(window_ms, sample_rate, "window_ms");
}

int FeatureConfig::shift_samples() const {
  return ms_to_samples(shift_ms, sample_rate, "shift_ms");
}

void FeatureConfig::validate() const {
  if (sample_rate == 0) throw ConfigError("sample_rate must be positive");
  if (mel_dim < 1) throw ConfigError("mel_dim must be positive");
  if (bits < 2 || bits > 16) throw ConfigError("bits must be in [2, 16]");
  if (mel_floor <= 0.0) throw ConfigError("mel_floor must be positive");
  const int w = window_samples();
  const int s = shift_samples();
  if (s > w) throw ConfigError("shift longer than window");
}

int PhonemeTranscript::total_frames() const {
  int t = 0;
  for (int d : durations) t += d;
  return t;
}

void PhonemeTranscript::validate(int phoneme_count) const {
  if (ids.size() != durations.size())
    throw DataError("transcript ids and durations differ in length");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= phoneme_count)
      throw DataError("transcript phoneme id out of range");
    if (durations[i] < 1) throw DataError("transcript duration must be >= 1 frame");
  }
}

std::vector<std::string> Corpus::speaker_ids() const {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.speaker_id);
  return {s.begin(), s.end()};
}

MelMatrix mel_extract(const std::vector<double>& waveform, const FeatureConfig& config) {
  config.validate();
  const int w = config.window_samples();
  const int s = config.shift_samples();
  const int d = config.mel_dim;
  if (static_cast<int>(waveform.size()) < w)
    throw DataError("waveform shorter than one analysis window");

  // Right-pad with window-shift zeros so frame count tracks length/shift and
  // a paired code sequence of T*samples_per_frame samples stays consistent.
  std::vector<double> x = waveform;
  x.resize(waveform.size() + static_cast<std::size_t>(w - s), 0.0);
  const int t = static_cast<int>((x.size() - static_cast<std::size_t>(w)) / s) + 1;

  int nfft = 1;
  while (nfft < w) nfft *= 2;
  const int nbins = nfft / 2 + 1;

  Eigen::VectorXd hann(w);
  for (int n = 0; n < w; ++n)
    hann(n) = 0.5 - 0.5 * std::cos(2.0 * M_PI * n / (w - 1));

  Mat cosm(nbins, w), sinm(nbins, w);
  for (int k = 0; k < nbins; ++k)
    for (int n = 0; n < w; ++n) {
      const double ang = 2.0 * M_PI * k * n / nfft;
      cosm(k, n) = std::cos(ang);
      sinm(k, n) = std::sin(ang);
    }

  // Triangular mel filters on a uniform mel grid over [0, nyquist].
  const double nyquist = config.sample_rate / 2.0;
  const double mel_hi = hz_to_mel(nyquist);
  std::vector<double> edges(static_cast<std::size_t>(d) + 2);
  for (int j = 0; j < d + 2; ++j) edges[j] = mel_to_hz(mel_hi * j / (d + 1));
  Mat bank = Mat::Zero(d, nbins);
  for (int j = 0; j < d; ++j) {
    const double lo = edges[j], mid = edges[j + 1], hi = edges[j + 2];
    for (int k = 0; k < nbins; ++k) {
      const double f = static_cast<double>(k) * config.sample_rate / nfft;
      double v = 0.0;
      if (f > lo && f < mid)
        v = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        v = (hi - f) / (hi - mid);
      bank(j, k) = v;
    }
  }

  Mat frames(t, w);
  for (int i = 0; i < t; ++i)
    for (int n = 0; n < w; ++n) frames(i, n) = x[static_cast<std::size_t>(i) * s + n] * hann(n);

  Mat re = frames * cosm.transpose();
  Mat im = frames * sinm.transpose();
  Mat power = re.array().square() + im.array().square();
  Mat energy = power * bank.transpose();

  MelMatrix out;
  out.values = (config.mel_floor + energy.array()).log().matrix();
  round_f32_inplace(out.values);
  out.frame_shift_ms = f32(config.shift_ms);
  out.window_ms = f32(config.window_ms);
  return out;
}

WaveCodes mu_law_encode(const std::vector<double>& samples, int bits,
                        std::uint32_t sample_rate) {
  if (bits < 2 || bits > 16) throw ConfigError("bits must be in [2, 16]");
  const int q = 1 << bits;
  const double mu = q - 1;
  const double denom = std::log1p(mu);
  WaveCodes out;
  out.quantization = static_cast<std::uint32_t>(q);
  out.sample_rate = sample_rate;
  out.codes.reserve(samples.size());
  for (double x : samples) {
    if (!(x >= -1.0 && x <= 1.0)) throw DataError("sample outside [-1, 1]");
    const double fx = (x < 0 ? -1.0 : 1.0) * std::log1p(mu * std::abs(x)) / denom;
    long c = static_cast<long>(std::floor((fx + 1.0) / 2.0 * q));
    c = std::clamp(c, 0L, static_cast<long>(q - 1));
    out.codes.push_back(static_cast<std::uint16_t>(c));
  }
  return out;
}

std::vector<double> mu_law_decode(const WaveCodes& codes) {
  const double q = codes.quantization;
  const double mu = q - 1;
  std::vector<double> out;
  out.reserve(codes.codes.size());
  for (std::uint16_t c : codes.codes) {
    if (c >= codes.quantization) throw DataError("code outside [0, Q)");
    const double yc = 2.0 * (c + 0.5) / q - 1.0;  // cell center in companded domain
    const double x = (yc < 0 ? -1.0 : 1.0) * (std::pow(1.0 + mu, std::abs(yc)) - 1.0) / mu;
    out.push_back(x);
  }
  return out;
}

std::vector<int> upsample_transcript(const PhonemeTranscript& t) {
  if (t.ids.size() != t.durations.size())
    throw DataError("transcript ids and durations differ in length");
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(t.total_frames()));
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    if (t.durations[i] < 1) throw DataError("transcript duration must be >= 1 frame");
    labels.insert(labels.end(), static_cast<std::size_t>(t.durations[i]), t.ids[i]);
  }
  return labels;
}

ToyCorpusSpec ToyCorpusSpec::desk(int n_speakers, int utterances_per_speaker) {
  ToyCorpusSpec spec;
  spec.utterances_per_speaker = utterances_per_speaker;
  for (int k = 0; k < n_speakers; ++k) {
    ToySpeaker sp;
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%02d", k);
    sp.id = buf;
    sp.f0_hz = 100.0 + 24.0 * k;
    sp.tilt = n_speakers > 1 ? 0.6 + 0.8 * k / (n_speakers - 1) : 1.0;
    spec.speakers.push_back(sp);
  }
  return spec;
}

namespace {

PhonemeTranscript sample_transcript(const ToyCorpusSpec& spec, Rng& rng) {
  PhonemeTranscript t;
  const int n = spec.min_phones + static_cast<int>(rng.uniform_int(
                                      static_cast<std::uint64_t>(spec.max_phones - spec.min_phones + 1)));
  int prev = -1;
  for (int i = 0; i < n; ++i) {
    int id = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.phoneme_count)));
    if (spec.phoneme_count > 1)
      while (id == prev)
        id = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.phoneme_count)));
    prev = id;
    t.ids.push_back(id);
    t.durations.push_back(spec.min_duration_frames +
                          static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(
                              spec.max_duration_frames - spec.min_duration_frames + 1))));
  }
  return t;
}

std::vector<double> synthesize(const ToyCorpusSpec& spec, const ToySpeaker& sp,
                               const PhonemeTranscript& t) {
  const int spf = spec.feature.samples_per_frame();
  const std::uint32_t sr = spec.feature.sample_rate;
  const int total = t.total_frames() * spf;
  std::vector<double> x(static_cast<std::size_t>(total), 0.0);

  // Phoneme identity lives in a spectral bump; speaker identity in the
  // fundamental and the harmonic rolloff.
  std::vector<double> formant(static_cast<std::size_t>(spec.phoneme_count));
  for (int p = 0; p < spec.phoneme_count; ++p)
    formant[p] = spec.phoneme_count > 1
                     ? 250.0 + 1450.0 * p / (spec.phoneme_count - 1)
                     : 800.0;

  const double f_max = 0.95 * sr / 2.0;
  const int n_harm = std::max(1, static_cast<int>(f_max / sp.f0_hz));

  int frame0 = 0;
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    const int s0 = frame0 * spf;
    const int s1 = (frame0 + t.durations[i]) * spf;
    std::vector<double> amp(static_cast<std::size_t>(n_harm));
    for (int h = 1; h <= n_harm; ++h) {
      const double fh = h * sp.f0_hz;
      const double bump = 2.0 * std::exp(-std::pow(fh - formant[t.ids[i]], 2.0) /
                                         (2.0 * 150.0 * 150.0));
      amp[h - 1] = (0.25 + bump) * std::pow(static_cast<double>(h), -sp.tilt);
    }
    for (int n = s0; n < s1; ++n) {
      const double u = static_cast<double>(n - s0) / (s1 - s0);
      const double env = 0.4 + 0.6 * std::sin(M_PI * u);
      double v = 0.0;
      for (int h = 1; h <= n_harm; ++h)
        v += amp[h - 1] * std::sin(2.0 * M_PI * h * sp.f0_hz * n / sr);
      x[static_cast<std::size_t>(n)] = env * v;
    }
    frame0 += t.durations[i];
  }

  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (double& v : x) v *= 0.95 / peak;
  return x;
}

}  // namespace

Corpus generate_toy_corpus(const ToyCorpusSpec& spec, std::uint64_t seed) {
  if (spec.speakers.empty()) throw ConfigError("toy corpus needs at least one speaker");
  if (spec.phoneme_count < 1) throw ConfigError("toy corpus needs at least one phoneme");
  if (spec.min_phones < 1 || spec.max_phones < spec.min_phones)
    throw ConfigError("invalid phones-per-utterance range");
  if (spec.min_duration_frames < 1 || spec.max_duration_frames < spec.min_duration_frames)
    throw ConfigError("invalid duration range");
  spec.feature.validate();

  Corpus corpus;
  for (int p = 0; p < spec.phoneme_count; ++p) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "p%02d", p);
    corpus.phonemes.push_back(buf);
  }

  for (int u = 0; u < spec.utterances_per_speaker; ++u) {
    Rng rng = Rng::stream(seed, "toy:utt", static_cast<std::uint64_t>(u));
    PhonemeTranscript t = sample_transcript(spec, rng);
    char ubuf[16];
    std::snprintf(ubuf, sizeof ubuf, "u%03d", u);
    for (const auto& sp : spec.speakers) {
      std::vector<double> wave = synthesize(spec, sp, t);
      UtteranceRecord rec;
      rec.utterance_id = ubuf;
      rec.speaker_id = sp.id;
      rec.transcript = t;
      rec.waveform = mu_law_encode(wave, spec.feature.bits, spec.feature.sample_rate);
      rec.mel = mel_extract(mu_law_decode(rec.waveform), spec.feature);
      corpus.records.push_back(std::move(rec));
    }
  }
  std::sort(corpus.records.begin(), corpus.records.end(),
            [](const UtteranceRecord& a, const UtteranceRecord& b) {
              return std::tie(a.utterance_id, a.speaker_id) <
                     std::tie(b.utterance_id, b.speaker_id);
            });
  return corpus;
}

void save_mel(const MelMatrix& mel, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_magic(out, "MELF");
  write_u32(out, 1);
  write_u32(out, static_cast<std::uint32_t>(mel.frames()));
  write_u32(out, static_cast<std::uint32_t>(mel.dim()));
  write_f32(out, static_cast<float>(mel.frame_shift_ms));
  write_f32(out, static_cast<float>(mel.window_ms));
  write_mat_f32(out, mel.values);
  if (!out) throw IoError("short write: " + path);
}

MelMatrix load_mel(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing mel file: " + path);
  expect_magic(in, "MELF", path);
  const std::uint32_t version = read_u32(in, path);
  if (version != 1) throw DataError("unsupported mel version in " + path);
  const std::uint32_t t = read_u32(in, path);
  const std::uint32_t d = read_u32(in, path);
  if (t < 1 || d < 1) throw DataError("empty mel matrix in " + path);
  MelMatrix mel;
  mel.frame_shift_ms = read_f32(in, path);
  mel.window_ms = read_f32(in, path);
  mel.values = read_mat_f32(in, static_cast<int>(t), static_cast<int>(d), path);
  if (!mel.values.allFinite()) throw DataError("non-finite mel values in " + path);
  return mel;
}

void save_codes(const WaveCodes& wc, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_magic(out, "MUQW");
  write_u32(out, 1);
  write_u32(out, wc.quantization);
  write_u32(out, wc.sample_rate);
  write_u64(out, wc.codes.size());
  for (std::uint16_t c : wc.codes) write_u16(out, c);
  if (!out) throw IoError("short write: " + path);
}

WaveCodes load_codes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing codes file: " + path);
  expect_magic(in, "MUQW", path);
  const std::uint32_t version = read_u32(in, path);
  if (version != 1) throw DataError("unsupported codes version in " + path);
  WaveCodes wc;
  wc.quantization = read_u32(in, path);
  wc.sample_rate = read_u32(in, path);
  const std::uint64_t n = read_u64(in, path);
  wc.codes.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    wc.codes[i] = read_u16(in, path);
    if (wc.codes[i] >= wc.quantization)
      throw DataError("code out of range in " + path);
  }
  return wc;
}

void save_lab(const PhonemeTranscript& t, const std::vector<std::string>& phonemes,
              const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  int frame = 0;
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    out << phonemes[static_cast<std::size_t>(t.ids[i])] << ' ' << frame << ' '
        << frame + t.durations[i] << '\n';
    frame += t.durations[i];
  }
  if (!out) throw IoError("short write: " + path);
}

PhonemeTranscript load_lab(const std::string& path,
                           const std::map<std::string, int>& symbol_to_id) {
  std::ifstream in(path);
  if (!in) throw DataError("missing alignment file: " + path);
  PhonemeTranscript t;
  std::string line;
  int expected_start = 0;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string sym;
    long start = 0, end = 0;
    if (!(ss >> sym >> start >> end))
      throw DataError("malformed alignment line " + std::to_string(lineno) + " in " + path);
    auto it = symbol_to_id.find(sym);
    if (it == symbol_to_id.end())
      throw DataError("unknown phoneme '" + sym + "' in " + path);
    if (start != expected_start || end <= start)
      throw DataError("non-contiguous alignment at line " + std::to_string(lineno) +
                      " in " + path);
    t.ids.push_back(it->second);
    t.durations.push_back(static_cast<int>(end - start));
    expected_start = static_cast<int>(end);
  }
  if (t.ids.empty()) throw DataError("empty alignment file: " + path);
  return t;
}

void save_corpus(const Corpus& corpus, const std::string& root) {
  fs::create_directories(root);
  {
    std::ofstream out(fs::path(root) / "phonemes.txt");
    if (!out) throw IoError("cannot open for writing: " + root + "/phonemes.txt");
    for (const auto& p : corpus.phonemes) out << p << '\n';
  }
  for (const auto& rec : corpus.records) {
    const fs::path dir = fs::path(root) / rec.speaker_id;
    fs::create_directories(dir);
    save_mel(rec.mel, (dir / (rec.utterance_id + ".mel")).string());
    save_codes(rec.waveform, (dir / (rec.utterance_id + ".wav.codes")).string());
    if (rec.transcript)
      save_lab(*rec.transcript, corpus.phonemes,
               (dir / (rec.utterance_id + ".lab")).string());
  }
}

Corpus load_corpus(const std::string& root) {
  Corpus corpus;
  if (!fs::exists(root)) return corpus;

  const fs::path phon = fs::path(root) / "phonemes.txt";
  std::map<std::string, int> symbol_to_id;
  if (fs::exists(phon)) {
    std::ifstream in(phon);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      symbol_to_id.emplace(line, static_cast<int>(corpus.phonemes.size()));
      corpus.phonemes.push_back(line);
    }
  }

  std::vector<fs::path> speaker_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) speaker_dirs.push_back(e.path());
  std::sort(speaker_dirs.begin(), speaker_dirs.end());

  for (const auto& dir : speaker_dirs) {
    std::vector<fs::path> mels;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".mel") mels.push_back(e.path());
    std::sort(mels.begin(), mels.end());
    for (const auto& mel_path : mels) {
      UtteranceRecord rec;
      rec.speaker_id = dir.filename().string();
      rec.utterance_id = mel_path.stem().string();
      rec.mel = load_mel(mel_path.string());

      fs::path codes_path = mel_path;
      codes_path.replace_extension(".wav.codes");
      rec.waveform = load_codes(codes_path.string());

      const double spf_exact = rec.waveform.sample_rate * rec.mel.frame_shift_ms / 1000.0;
      const long spf = std::lround(spf_exact);
      if (std::abs(spf_exact - spf) > 1e-6 || spf < 1)
        throw DataError("frame shift and sample rate disagree in " + codes_path.string());
      if (rec.waveform.codes.size() !=
          static_cast<std::size_t>(rec.mel.frames()) * static_cast<std::size_t>(spf))
        throw DataError("code count is not frames x samples_per_frame in " +
                        codes_path.string());

      fs::path lab_path = mel_path;
      lab_path.replace_extension(".lab");
      if (fs::exists(lab_path)) {
        PhonemeTranscript t = load_lab(lab_path.string(), symbol_to_id);
        if (t.total_frames() != rec.mel.frames())
          throw DataError("alignment durations sum to " +
                          std::to_string(t.total_frames()) + " but mel has " +
                          std::to_string(rec.mel.frames()) + " frames: " +
                          lab_path.string());
        rec.transcript = std::move(t);
      }
      corpus.records.push_back(std::move(rec));
    }
  }
  std::sort(corpus.records.begin(), corpus.records.end(),
            [](const UtteranceRecord& a, const UtteranceRecord& b) {
              return std::tie(a.utterance_id, a.speaker_id) <
                     std::tie(b.utterance_id, b.speaker_id);
            });
  return corpus;
}

}  // namespace nautilus
