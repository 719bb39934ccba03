#pragma once

#include <string>
#include <vector>

namespace nautilus {

enum class LayerType { FG, FGS, HW, QRNN, DENSE };

struct LayerSpec {
  std::string name;
  LayerType type = LayerType::FG;
  int channels = 64;
  int dilation = 1;
  bool causal = false;
  bool speaker_bias = false;
};

// One structured-text description of every layer in the system. Networks are
// the name prefixes tenc. / senc. / sdec. / tdec. / voc.; widths and depths
// live here so scale is a config change.
struct ArchManifest {
  int latent = 64;            // Z
  int mel_dim = 16;           // D
  int phonemes = 56;          // P
  int speakers = 4;           // K
  int quantization = 256;     // Q
  int samples_per_frame = 50;
  std::vector<LayerSpec> layers;

  struct DeskOptions {
    int channels = 64;
    int latent = 64;
    int voc_channels = 32;
    int voc_layers = 10;
    int quantization = 256;
    int samples_per_frame = 50;
  };
  static ArchManifest desk(int phonemes, int speakers, int mel_dim,
                           const DeskOptions& opt);
  static ArchManifest desk(int phonemes, int speakers, int mel_dim) {
    return desk(phonemes, speakers, mel_dim, DeskOptions());
  }

  static ArchManifest parse(const std::string& text);
  std::string serialize() const;

  std::vector<const LayerSpec*> network(const std::string& prefix) const;
  const LayerSpec* find(const std::string& name) const;
  void validate() const;
};

}  // namespace nautilus
