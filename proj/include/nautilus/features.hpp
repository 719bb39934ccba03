#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nautilus/util.hpp"

namespace nautilus {

struct FeatureConfig {
  std::uint32_t sample_rate = 4000;
  double window_ms = 50.0;
  double shift_ms = 12.5;
  int mel_dim = 16;
  int bits = 8;
  double mel_floor = 1e-5;

  int window_samples() const;
  int shift_samples() const;
  int samples_per_frame() const { return shift_samples(); }
  int quantization_levels() const { return 1 << bits; }

  void validate() const;
};

struct PhonemeTranscript {
  std::vector<int> ids;
  std::vector<int> durations;

  int total_frames() const;
  void validate(int phoneme_count) const;
};

struct MelMatrix {
  Mat values;  // T x D
  double frame_shift_ms = 12.5;
  double window_ms = 50.0;

  int frames() const { return static_cast<int>(values.rows()); }
  int dim() const { return static_cast<int>(values.cols()); }
};

struct WaveCodes {
  std::vector<std::uint16_t> codes;
  std::uint32_t quantization = 256;  // Q = 2^bits
  std::uint32_t sample_rate = 4000;
};

struct UtteranceRecord {
  std::string utterance_id;
  std::string speaker_id;
  std::optional<PhonemeTranscript> transcript;
  MelMatrix mel;
  WaveCodes waveform;
};

struct Corpus {
  std::vector<std::string> phonemes;  // line index = phoneme id
  std::vector<UtteranceRecord> records;

  int phoneme_count() const { return static_cast<int>(phonemes.size()); }
  std::vector<std::string> speaker_ids() const;  // sorted, unique
};

MelMatrix mel_extract(const std::vector<double>& waveform, const FeatureConfig& config);

WaveCodes mu_law_encode(const std::vector<double>& samples, int bits,
                        std::uint32_t sample_rate);
std::vector<double> mu_law_decode(const WaveCodes& codes);

// Frame-level phoneme labels, length = sum of durations.
std::vector<int> upsample_transcript(const PhonemeTranscript& t);

struct ToySpeaker {
  std::string id;
  double f0_hz = 120.0;
  double tilt = 1.0;  // harmonic rolloff exponent
};

struct ToyCorpusSpec {
  int phoneme_count = 12;
  std::vector<ToySpeaker> speakers;
  int utterances_per_speaker = 10;
  int min_phones = 3;
  int max_phones = 8;
  int min_duration_frames = 2;
  int max_duration_frames = 6;
  FeatureConfig feature;

  // n_speakers voices spread over pitch 100..100+24*(n-1) Hz and tilt 0.6..1.4.
  static ToyCorpusSpec desk(int n_speakers, int utterances_per_speaker);
};

// Utterance u shares one transcript across all speakers (a parallel corpus),
// so records pair across speakers by utterance_id.
Corpus generate_toy_corpus(const ToyCorpusSpec& spec, std::uint64_t seed);

Corpus load_corpus(const std::string& root);
void save_corpus(const Corpus& corpus, const std::string& root);

// Single-file forms of the corpus record pieces.
void save_mel(const MelMatrix& mel, const std::string& path);
MelMatrix load_mel(const std::string& path);
void save_codes(const WaveCodes& wc, const std::string& path);
WaveCodes load_codes(const std::string& path);
void save_lab(const PhonemeTranscript& t, const std::vector<std::string>& phonemes,
              const std::string& path);
PhonemeTranscript load_lab(const std::string& path,
                           const std::map<std::string, int>& symbol_to_id);

}  // namespace nautilus
