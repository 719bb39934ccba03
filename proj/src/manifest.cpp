#include "nautilus/manifest.hpp"

#include <cstdio>
#include <map>
#include <sstream>

#include "nautilus/errors.hpp"

namespace nautilus {

namespace {

const std::map<std::string, LayerType> kTypeNames = {
    {"FG", LayerType::FG},
    {"FGS", LayerType::FGS},
    {"HW", LayerType::HW},
    {"QRNN", LayerType::QRNN},
    {"DENSE", LayerType::DENSE},
};

std::string type_name(LayerType t) {
  for (const auto& [name, type] : kTypeNames)
    if (type == t) return name;
  return "?";
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

}  // namespace

ArchManifest ArchManifest::desk(int phonemes, int speakers, int mel_dim,
                                const DeskOptions& opt) {
  ArchManifest m;
  m.latent = opt.latent;
  m.mel_dim = mel_dim;
  m.phonemes = phonemes;
  m.speakers = speakers;
  m.quantization = opt.quantization;
  m.samples_per_frame = opt.samples_per_frame;
  const int c = opt.channels;
  const int vc = opt.voc_channels;

  auto fg = [&](const std::string& name, int ch, int dil, bool causal, bool spk) {
    m.layers.push_back({name, spk ? LayerType::FGS : LayerType::FG, ch, dil, causal, spk});
  };
  const int dils[6] = {1, 2, 4, 1, 2, 4};

  m.layers.push_back({"tenc.ctx", LayerType::QRNN, c, 1, false, false});
  for (int i = 0; i < 6; ++i) fg("tenc.lat" + std::to_string(i), c, dils[i], false, false);
  m.layers.push_back({"tenc.mu", LayerType::DENSE, m.latent, 1, false, false});
  m.layers.push_back({"tenc.logvar", LayerType::DENSE, m.latent, 1, false, false});

  for (int i = 0; i < 6; ++i) fg("senc.fg" + std::to_string(i), c, dils[i], false, false);
  m.layers.push_back({"senc.mu", LayerType::DENSE, m.latent, 1, false, false});
  m.layers.push_back({"senc.logvar", LayerType::DENSE, m.latent, 1, false, false});

  for (int i = 0; i < 6; ++i) fg("sdec.ctx" + std::to_string(i), c, dils[i], true, true);
  m.layers.push_back({"sdec.pre", LayerType::DENSE, c, 1, true, false});
  m.layers.push_back({"sdec.hw0", LayerType::HW, c, 1, true, false});
  m.layers.push_back({"sdec.hw1", LayerType::HW, c, 1, true, false});
  fg("sdec.mrg0", c, 1, true, false);
  fg("sdec.mrg1", c, 1, true, false);
  m.layers.push_back({"sdec.out", LayerType::DENSE, mel_dim, 1, true, false});

  fg("tdec.fg0", c, 1, false, false);
  fg("tdec.fg1", c, 2, false, false);
  m.layers.push_back({"tdec.out", LayerType::DENSE, phonemes, 1, false, false});

  m.layers.push_back({"voc.embed", LayerType::DENSE, vc, 1, true, false});
  m.layers.push_back({"voc.cond", LayerType::DENSE, vc, 1, true, false});
  int dil = 1;
  for (int i = 0; i < opt.voc_layers; ++i) {
    fg("voc.l" + std::to_string(i), vc, dil, true, true);
    dil *= 2;
    if (dil > 512) dil = 1;
  }
  m.layers.push_back({"voc.post0", LayerType::DENSE, vc, 1, true, false});
  m.layers.push_back({"voc.post1", LayerType::DENSE, opt.quantization, 1, true, false});

  m.validate();
  return m;
}

std::string ArchManifest::serialize() const {
  std::ostringstream out;
  out << "nautilus-arch 1\n";
  out << "latent " << latent << '\n';
  out << "mel " << mel_dim << '\n';
  out << "phonemes " << phonemes << '\n';
  out << "speakers " << speakers << '\n';
  out << "quantization " << quantization << '\n';
  out << "samples_per_frame " << samples_per_frame << '\n';
  for (const auto& l : layers)
    out << "layer " << l.name << ' ' << type_name(l.type) << ' ' << l.channels << ' '
        << l.dilation << ' ' << (l.causal ? 1 : 0) << ' ' << (l.speaker_bias ? 1 : 0)
        << '\n';
  return out.str();
}

ArchManifest ArchManifest::parse(const std::string& text) {
  ArchManifest m;
  m.layers.clear();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    auto want_int = [&](int& dst) {
      if (!(ss >> dst))
        throw ConfigError("manifest line " + std::to_string(lineno) + ": expected integer");
    };
    if (key == "nautilus-arch") {
      int version = 0;
      want_int(version);
      if (version != 1) throw ConfigError("unsupported manifest version");
      header_seen = true;
    } else if (key == "latent") {
      want_int(m.latent);
    } else if (key == "mel") {
      want_int(m.mel_dim);
    } else if (key == "phonemes") {
      want_int(m.phonemes);
    } else if (key == "speakers") {
      want_int(m.speakers);
    } else if (key == "quantization") {
      want_int(m.quantization);
    } else if (key == "samples_per_frame") {
      want_int(m.samples_per_frame);
    } else if (key == "layer") {
      LayerSpec l;
      std::string type;
      int causal = 0, spk = 0;
      if (!(ss >> l.name >> type >> l.channels >> l.dilation >> causal >> spk))
        throw ConfigError("manifest line " + std::to_string(lineno) + ": malformed layer");
      auto it = kTypeNames.find(type);
      if (it == kTypeNames.end())
        throw ConfigError("manifest line " + std::to_string(lineno) + ": unknown type " + type);
      l.type = it->second;
      l.causal = causal != 0;
      l.speaker_bias = spk != 0;
      m.layers.push_back(l);
    } else {
      throw ConfigError("manifest line " + std::to_string(lineno) + ": unknown key " + key);
    }
  }
  if (!header_seen) throw ConfigError("manifest missing nautilus-arch header");
  m.validate();
  return m;
}

std::vector<const LayerSpec*> ArchManifest::network(const std::string& prefix) const {
  std::vector<const LayerSpec*> out;
  for (const auto& l : layers)
    if (starts_with(l.name, prefix)) out.push_back(&l);
  return out;
}

const LayerSpec* ArchManifest::find(const std::string& name) const {
  for (const auto& l : layers)
    if (l.name == name) return &l;
  return nullptr;
}

void ArchManifest::validate() const {
  if (latent < 1 || mel_dim < 1 || phonemes < 1 || speakers < 1)
    throw ConfigError("manifest dimensions must be positive");
  if (quantization < 4 || samples_per_frame < 1)
    throw ConfigError("manifest vocoder dimensions invalid");
  std::map<std::string, int> seen;
  for (const auto& l : layers) {
    if (++seen[l.name] > 1) throw ConfigError("duplicate layer name " + l.name);
    if (l.channels < 1 || l.dilation < 1)
      throw ConfigError("layer " + l.name + ": channels and dilation must be positive");
    if ((l.type == LayerType::FGS) != l.speaker_bias)
      throw ConfigError("layer " + l.name + ": speaker-bias flag must match FGS type");
    const bool encoder = starts_with(l.name, "tenc.") || starts_with(l.name, "senc.");
    if (encoder && l.speaker_bias)
      throw ConfigError("layer " + l.name + ": encoders must stay speaker-independent");
    if (!starts_with(l.name, "tenc.") && !starts_with(l.name, "senc.") &&
        !starts_with(l.name, "sdec.") && !starts_with(l.name, "tdec.") &&
        !starts_with(l.name, "voc."))
      throw ConfigError("layer " + l.name + ": unknown network prefix");
    if (l.type == LayerType::QRNN && l.channels % 2 != 0)
      throw ConfigError("layer " + l.name + ": bidirectional channels must be even");
  }
}

}  // namespace nautilus
