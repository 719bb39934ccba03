#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "nautilus/autodiff.hpp"
#include "nautilus/features.hpp"
#include "nautilus/manifest.hpp"
#include "nautilus/params.hpp"
#include "nautilus/rng.hpp"

namespace nautilus {

struct LLEDistribution {
  Mat mean;  // T x Z
  Mat std;   // T x Z, strictly positive (exp of half the raw log-variance)
};

struct LLESequence {
  Mat z;  // T x Z
};

inline constexpr int kNoSpeaker = -1;

// Text-speech model: every parameter under tenc. / senc. / sdec. / tdec.
// Speaker bias tables are K x C rows indexed by position in speaker_ids;
// the id list is supplied by the corpus, not persisted.
struct Model {
  ArchManifest arch;
  ParamStore params;
  std::vector<std::string> speaker_ids;

  static Model init(const ArchManifest& arch, std::vector<std::string> speaker_ids,
                    std::uint64_t seed);
  int speaker_index(const std::string& id) const;
  std::array<std::uint8_t, 32> config_hash() const;
};

struct DropoutPlan {
  bool enabled = false;
  Rng* rng = nullptr;

  double rate(const std::string& layer_name) const;
  ad::Var apply(const ad::Var& x, const std::string& layer_name) const;
};

// Graph builders shared by training, adaptation, and inference. All take the
// caller's ParamGraph so gradients land in one place.
namespace graph {

struct Dist {
  ad::Var mu;   // T x Z
  ad::Var raw;  // T x Z log-variance
};

ad::Var dense(ad::ParamGraph& pg, const std::string& name, const ad::Var& x);
ad::Var fg_layer(ad::ParamGraph& pg, const LayerSpec& spec, const ad::Var& x,
                 int speaker);
ad::Var hw_layer(ad::ParamGraph& pg, const LayerSpec& spec, const ad::Var& x);
ad::Var qrnn_layer(ad::ParamGraph& pg, const LayerSpec& spec, const ad::Var& x);

Dist tenc(ad::ParamGraph& pg, const ArchManifest& arch, const PhonemeTranscript& t,
          const DropoutPlan& drop);
Dist senc(ad::ParamGraph& pg, const ArchManifest& arch, const ad::Var& mel,
          const DropoutPlan& drop);
// Teacher-forced decoder: past frames are mel shifted right by one.
ad::Var sdec(ad::ParamGraph& pg, const ArchManifest& arch, const ad::Var& z,
             int speaker, const ad::Var& mel_for_past, const DropoutPlan& drop);
ad::Var tdec(ad::ParamGraph& pg, const ArchManifest& arch, const ad::Var& z,
             const DropoutPlan& drop);
// z = mu + std * eps with std = exp(raw/2); null noise selects the mean.
ad::Var reparam(const Dist& d, const Mat* noise);
ad::Var std_from_raw(const ad::Var& raw);

}  // namespace graph

LLEDistribution text_encoder_forward(const Model& model, const PhonemeTranscript& t);
LLEDistribution speech_encoder_forward(const Model& model, const MelMatrix& mel);
LLESequence reparameterize(const LLEDistribution& dist, const std::optional<Mat>& noise);
// past_mel absent selects the autoregressive unroll.
MelMatrix speech_decoder_forward(const Model& model, const LLESequence& z, int speaker,
                                 const std::optional<Mat>& past_mel);
Mat text_decoder_forward(const Model& model, const LLESequence& z);

// Drops every <prefix>*.bf/.bg table; idempotent.
void remove_speaker_biases(ParamStore& params, const ArchManifest& arch,
                           const std::string& prefix);
bool has_speaker_biases(const ParamStore& params, const ArchManifest& arch,
                        const std::string& prefix);

// Parameter tensors (with f32-representable init) for one network prefix.
void init_network_params(ParamStore& store, const ArchManifest& arch,
                         const std::string& prefix, Rng& rng);

std::string network_hash(const ParamStore& params, const std::string& prefix);

}  // namespace nautilus
