#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nautilus/losses.hpp"
#include "nautilus/net.hpp"
#include "nautilus/vocoder.hpp"

namespace nautilus {

struct StageConfig {
  double learning_rate = 0.1;  // presets ship 1e-3; see scenario_a/scenario_b
  int batch_size = 8;
  int train_max_epochs = 60;       // initial training cap (early stopping applies)
  int vocoder_train_epochs = 25;   // initial vocoder cap (early stopping applies)
  int adapt_acoustic_epochs = 256;
  int adapt_vocoder_epochs = 128;
  int weld_epochs = 64;
  double mixin_rate = 0.9;
  double inference_std_scale = 0.1;
  int early_stop_patience = 10;  // <= 0 disables
  int segment_frames = 8;        // vocoder training crop
  std::uint64_t seed = 0;
  LossWeights weights;
  bool weld_enabled = true;          // ablation A drops welding
  bool cycle_enabled = true;         // ablation B drops the cycle term
  bool text_decoder_enabled = true;  // ablation C drops the text decoder

  static StageConfig scenario_a();
  static StageConfig scenario_b();
  void validate() const;

  // Flat key = value text (stage.* and loss.* prefixes), diff-able across
  // experiment setups and lossless for doubles.
  std::string serialize() const;
};

// Applies one stage.* / loss.* setting; unknown key or bad value -> ConfigError.
void apply_stage_setting(StageConfig& cfg, const std::string& key,
                         const std::string& value);

struct TrainResult {
  std::vector<LossReport> model_curves;
  std::vector<LossReport> vocoder_curves;
};

struct WeldResult {
  std::vector<LossReport> curves;
  double generated_fraction = 0.0;  // share of conditioning frames taken from the decoder
};

struct InferenceResult {
  MelMatrix mel;
  WaveCodes codes;
};

// Initial multi-speaker training: the text-speech model on the joint goals
// plus the tied-layer term, the vocoder separately on natural codes. Curves
// include the unoptimized ttt diagnostic.
TrainResult train_initial(Model& model, Vocoder& vocoder, const Corpus& corpus,
                          const StageConfig& cfg);

// Step 1, unsupervised: strip decoder speaker biases, fine-tune the remaining
// decoder parameters on reconstruction plus the cycle term. Encoders and the
// text decoder stay frozen; transcripts are never read.
std::vector<LossReport> clone_unsupervised_step1(
    Model& model, const std::vector<UtteranceRecord>& slice, const StageConfig& cfg);

// Step 1, supervised: strip decoder biases, fine-tune speech decoder and text
// encoder on the supervised adaptation loss. Speech encoder stays frozen.
std::vector<LossReport> clone_supervised_step1(
    Model& model, const std::vector<UtteranceRecord>& slice, const StageConfig& cfg);

// Step 2: joint decoder/vocoder fine-tuning on mean-value LLE reconstructions
// with per-frame mix-in of generated and natural conditioning frames.
WeldResult weld(Model& model, Vocoder& vocoder,
                const std::vector<UtteranceRecord>& slice, const StageConfig& cfg);

InferenceResult infer_tts(const Model& model, const Vocoder& vocoder,
                          const PhonemeTranscript& transcript, const StageConfig& cfg,
                          std::uint64_t seed, GenMode mode = GenMode::kSample);
InferenceResult infer_vc(const Model& model, const Vocoder& vocoder,
                         const MelMatrix& source_mel, const StageConfig& cfg,
                         std::uint64_t seed, GenMode mode = GenMode::kSample);

}  // namespace nautilus
