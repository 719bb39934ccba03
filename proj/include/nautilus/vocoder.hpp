#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nautilus/losses.hpp"
#include "nautilus/net.hpp"

namespace nautilus {

// Autoregressive neural vocoder: embedded previous sample plus frame-repeated
// mel conditioning through a stack of gated residual blocks with per-speaker
// biases, softmax over Q waveform classes.
struct Vocoder {
  ArchManifest arch;
  ParamStore params;  // voc.* tensors only
  std::vector<std::string> speaker_ids;

  static Vocoder init(const ArchManifest& arch, std::vector<std::string> speaker_ids,
                      std::uint64_t seed);
  int speaker_index(const std::string& id) const;
  std::array<std::uint8_t, 32> config_hash() const;
};

enum class GenMode { kSample, kArgmax };

struct VocoderTrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 8;
  int epochs = 0;
  int segment_frames = 8;  // conditioning crop length per training item
  std::uint64_t seed = 0;
};

// One cropped training item: a frame window of one record.
struct VocBatchItem {
  int record = 0;
  int start_frame = 0;
  int frames = 0;
};

// Deterministic visit order and crop choice for one epoch. Welding replays
// the same plan so its vocoder updates coincide with plain adaptation.
std::vector<VocBatchItem> voc_epoch_plan(std::uint64_t seed, int epoch,
                                         const std::vector<int>& frame_counts,
                                         int segment_frames);

namespace graph {

// Teacher-forced posterior graph. prev_ids[n] is the previous waveform class
// at sample n (negative for the zero start row); frame_map[n] indexes the row
// of cond supplying sample n's conditioning.
ad::Var voc(ad::ParamGraph& pg, const ArchManifest& arch,
            const std::vector<int>& prev_ids, const ad::Var& cond,
            const std::vector<int>& frame_map, int speaker);

}  // namespace graph

Mat vocoder_forward(const Vocoder& v, const WaveCodes& codes, const MelMatrix& mel,
                    int speaker);
double loss_voc(const Mat& posteriors, const WaveCodes& codes);
WaveCodes vocoder_generate(const Vocoder& v, const MelMatrix& mel, int speaker,
                           std::uint64_t seed, GenMode mode);

// Speaker biases are removed, then every remaining parameter is fine-tuned on
// the slice's natural codes for a fixed epoch budget. One report per epoch.
std::vector<LossReport> adapt_vocoder(Vocoder& v,
                                      const std::vector<UtteranceRecord>& slice,
                                      const VocoderTrainConfig& cfg);

}  // namespace nautilus
