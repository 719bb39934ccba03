#include "nautilus/net.hpp"

#include <algorithm>
#include <cmath>

#include "nautilus/errors.hpp"

namespace nautilus {

namespace {

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

Mat init_weight(Rng& rng, int rows, int cols, int fan_in, double gain = 1.0) {
  Mat w(rows, cols);
  const double scale = gain * std::sqrt(1.0 / fan_in);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) w(i, j) = f32(scale * rng.normal());
  return w;
}

// tanh(f) * sigmoid(g) shrinks unit-variance inputs to roughly a third per
// layer. The encoder stacks are deep enough that their latent heads would
// otherwise collapse toward zero mean at init, so their gated taps get a
// compensating gain; the decoders are shallow and keep the plain scale.
constexpr double kGatedGain = 2.5;

bool encoder_layer(const std::string& name) {
  return starts_with(name, "tenc.") || starts_with(name, "senc.");
}

void add_conv_params(ParamStore& store, const std::string& base, int in, int out,
                     Rng& rng) {
  const double gain = encoder_layer(base) ? kGatedGain : 1.0;
  for (int tap = 0; tap < 3; ++tap) {
    store.values[base + ".Wf" + std::to_string(tap)] =
        init_weight(rng, in, out, 3 * in, gain);
    store.values[base + ".Wg" + std::to_string(tap)] =
        init_weight(rng, in, out, 3 * in, gain);
  }
  store.values[base + ".cf"] = Mat::Zero(1, out);
  store.values[base + ".cg"] = Mat::Zero(1, out);
}

void add_layer_params(ParamStore& store, const LayerSpec& l, int in, int speakers,
                      Rng& rng) {
  switch (l.type) {
    case LayerType::FG:
    case LayerType::FGS:
      add_conv_params(store, l.name, in, l.channels, rng);
      if (l.type == LayerType::FGS) {
        store.values[l.name + ".bf"] = Mat::Zero(speakers, l.channels);
        store.values[l.name + ".bg"] = Mat::Zero(speakers, l.channels);
      }
      if (starts_with(l.name, "voc.l")) {
        store.values[l.name + ".Wr"] = init_weight(rng, l.channels, l.channels, l.channels);
        store.values[l.name + ".Ws"] = init_weight(rng, l.channels, l.channels, l.channels);
      }
      break;
    case LayerType::HW:
      if (in != l.channels) throw ConfigError("highway layer " + l.name + " must be square");
      store.values[l.name + ".Wf"] = init_weight(rng, in, l.channels, in);
      store.values[l.name + ".Wg"] = init_weight(rng, in, l.channels, in);
      break;
    case LayerType::QRNN: {
      const int half = l.channels / 2;
      const double gain = encoder_layer(l.name) ? kGatedGain : 1.0;
      for (const char* dir : {".fwd", ".bwd"}) {
        const std::string base = l.name + dir;
        for (int tap = 0; tap < 3; ++tap) {
          store.values[base + ".Wc" + std::to_string(tap)] =
              init_weight(rng, in, half, 3 * in, gain);
          store.values[base + ".Wf" + std::to_string(tap)] =
              init_weight(rng, in, half, 3 * in, gain);
        }
        store.values[base + ".cc"] = Mat::Zero(1, half);
        store.values[base + ".cf"] = Mat::Zero(1, half);
      }
      break;
    }
    case LayerType::DENSE:
      store.values[l.name + ".W"] = init_weight(rng, in, l.channels, in);
      store.values[l.name + ".b"] = Mat::Zero(1, l.channels);
      break;
  }
}

struct NetLayers {
  std::vector<const LayerSpec*> ctx;    // tenc.ctx* / sdec.ctx*
  std::vector<const LayerSpec*> stack;  // main FG chain / voc blocks
  std::vector<const LayerSpec*> hw;     // sdec.hw*
  const LayerSpec* pre = nullptr;
  std::vector<const LayerSpec*> mrg;
  const LayerSpec* out = nullptr;
  const LayerSpec* mu = nullptr;
  const LayerSpec* logvar = nullptr;
  const LayerSpec* embed = nullptr;
  const LayerSpec* cond = nullptr;
  const LayerSpec* post0 = nullptr;
  const LayerSpec* post1 = nullptr;
};

const LayerSpec* require(const ArchManifest& arch, const std::string& name) {
  const LayerSpec* l = arch.find(name);
  if (!l) throw ConfigError("manifest is missing layer " + name);
  return l;
}

NetLayers collect(const ArchManifest& arch, const std::string& prefix) {
  NetLayers n;
  for (const auto& l : arch.layers) {
    if (!starts_with(l.name, prefix)) continue;
    if (starts_with(l.name, "tenc.ctx") || starts_with(l.name, "sdec.ctx"))
      n.ctx.push_back(&l);
    else if (starts_with(l.name, "tenc.lat") || starts_with(l.name, "senc.fg") ||
             starts_with(l.name, "tdec.fg") || starts_with(l.name, "voc.l"))
      n.stack.push_back(&l);
    else if (starts_with(l.name, "sdec.hw"))
      n.hw.push_back(&l);
    else if (l.name == "sdec.pre")
      n.pre = &l;
    else if (starts_with(l.name, "sdec.mrg"))
      n.mrg.push_back(&l);
    else if (l.name == prefix + "out")
      n.out = &l;
    else if (l.name == prefix + "mu")
      n.mu = &l;
    else if (l.name == prefix + "logvar")
      n.logvar = &l;
    else if (l.name == "voc.embed")
      n.embed = &l;
    else if (l.name == "voc.cond")
      n.cond = &l;
    else if (l.name == "voc.post0")
      n.post0 = &l;
    else if (l.name == "voc.post1")
      n.post1 = &l;
    else
      throw ConfigError("layer " + l.name + " does not fit the network structure");
  }
  return n;
}

}  // namespace

void init_network_params(ParamStore& store, const ArchManifest& arch,
                         const std::string& prefix, Rng& rng) {
  NetLayers n = collect(arch, prefix);
  const int k = arch.speakers;
  if (prefix == "tenc.") {
    if (n.ctx.empty() || !n.mu || !n.logvar)
      throw ConfigError("text encoder needs ctx and mu/logvar layers");
    int cur = arch.phonemes;
    for (const auto* l : n.ctx) {
      add_layer_params(store, *l, cur, k, rng);
      cur = l->channels;
    }
    for (const auto* l : n.stack) {
      add_layer_params(store, *l, cur, k, rng);
      cur = l->channels;
    }
    add_layer_params(store, *n.mu, cur, k, rng);
    add_layer_params(store, *n.logvar, cur, k, rng);
  } else if (prefix == "senc.") {
    if (n.stack.empty() || !n.mu || !n.logvar)
      throw ConfigError("speech encoder needs fg and mu/logvar layers");
    int cur = arch.mel_dim;
    for (const auto* l : n.stack) {
      add_layer_params(store, *l, cur, k, rng);
      cur = l->channels;
    }
    add_layer_params(store, *n.mu, cur, k, rng);
    add_layer_params(store, *n.logvar, cur, k, rng);
  } else if (prefix == "sdec.") {
    if (n.ctx.empty() || !n.pre || n.mrg.empty() || !n.out)
      throw ConfigError("speech decoder needs ctx, pre, mrg, and out layers");
    int cur = arch.latent;
    for (const auto* l : n.ctx) {
      add_layer_params(store, *l, cur, k, rng);
      cur = l->channels;
    }
    int pcur = arch.mel_dim;
    add_layer_params(store, *n.pre, pcur, k, rng);
    pcur = n.pre->channels;
    for (const auto* l : n.hw) {
      add_layer_params(store, *l, pcur, k, rng);
      pcur = l->channels;
    }
    int mcur = cur + pcur;
    for (const auto* l : n.mrg) {
      add_layer_params(store, *l, mcur, k, rng);
      mcur = l->channels;
    }
    add_layer_params(store, *n.out, mcur, k, rng);
  } else if (prefix == "tdec.") {
    if (!n.out) throw ConfigError("text decoder needs an out layer");
    int cur = arch.latent;
    for (const auto* l : n.stack) {
      add_layer_params(store, *l, cur, k, rng);
      cur = l->channels;
    }
    add_layer_params(store, *n.out, cur, k, rng);
  } else if (prefix == "voc.") {
    if (!n.embed || !n.cond || n.stack.empty() || !n.post0 || !n.post1)
      throw ConfigError("vocoder needs embed, cond, blocks, and post layers");
    add_layer_params(store, *n.embed, arch.quantization, k, rng);
    add_layer_params(store, *n.cond, arch.mel_dim, k, rng);
    int cur = n.embed->channels;
    if (n.cond->channels != cur)
      throw ConfigError("voc.embed and voc.cond widths must agree");
    for (const auto* l : n.stack) {
      if (l->channels != cur)
        throw ConfigError("vocoder blocks must keep a constant width");
      add_layer_params(store, *l, cur, k, rng);
    }
    add_layer_params(store, *n.post0, cur, k, rng);
    add_layer_params(store, *n.post1, n.post0->channels, k, rng);
  } else {
    throw ConfigError("unknown network prefix " + prefix);
  }
}

Model Model::init(const ArchManifest& arch, std::vector<std::string> speaker_ids,
                  std::uint64_t seed) {
  arch.validate();
  if (static_cast<int>(speaker_ids.size()) != arch.speakers)
    throw ConfigError("speaker id list does not match manifest speaker count");
  Model m;
  m.arch = arch;
  m.speaker_ids = std::move(speaker_ids);
  Rng rng = Rng::stream(seed, "init");
  for (const char* prefix : {"tenc.", "senc.", "sdec.", "tdec."})
    init_network_params(m.params, arch, prefix, rng);
  return m;
}

int Model::speaker_index(const std::string& id) const {
  auto it = std::find(speaker_ids.begin(), speaker_ids.end(), id);
  if (it == speaker_ids.end()) throw ModelError("unknown speaker id: " + id);
  return static_cast<int>(it - speaker_ids.begin());
}

std::array<std::uint8_t, 32> Model::config_hash() const {
  return sha256("model\n" + arch.serialize());
}

double DropoutPlan::rate(const std::string& layer_name) const {
  if (starts_with(layer_name, "tenc.ctx") || starts_with(layer_name, "sdec.hw"))
    return 0.5;
  return 0.2;
}

ad::Var DropoutPlan::apply(const ad::Var& x, const std::string& layer_name) const {
  if (!enabled) return x;
  if (!rng) throw ModelError("dropout enabled without a random stream");
  const double r = rate(layer_name);
  Mat mask(x->value.rows(), x->value.cols());
  const double keep_scale = 1.0 / (1.0 - r);
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      mask(i, j) = rng->uniform() >= r ? keep_scale : 0.0;
  return ad::mul_const(x, mask);
}

namespace graph {

namespace {

// Dilated width-3 convolution taps. Causal looks back (t-2d, t-d, t);
// centered looks across (t-d, t, t+d).
ad::Var conv3(ad::ParamGraph& pg, const std::string& base, const char* gate,
              const ad::Var& x, int dilation, bool causal) {
  const int d = dilation;
  const int off[3] = {causal ? 2 * d : d, causal ? d : 0, causal ? 0 : -d};
  ad::Var sum;
  for (int tap = 0; tap < 3; ++tap) {
    ad::Var w = pg(base + ".W" + gate + std::to_string(tap));
    ad::Var shifted = off[tap] == 0 ? x : ad::shift_rows(x, off[tap]);
    ad::Var term = ad::matmul(shifted, w);
    sum = tap == 0 ? term : ad::add(sum, term);
  }
  return ad::add_row_bias(sum, pg(base + ".c" + gate));
}

}  // namespace

ad::Var dense(ad::ParamGraph& pg, const std::string& name, const ad::Var& x) {
  return ad::add_row_bias(ad::matmul(x, pg(name + ".W")), pg(name + ".b"));
}

ad::Var fg_layer(ad::ParamGraph& pg, const LayerSpec& spec, const ad::Var& x,
                 int speaker) {
  ad::Var f = conv3(pg, spec.name, "f", x, spec.dilation, spec.causal);
  ad::Var g = conv3(pg, spec.name, "g", x, spec.dilation, spec.causal);
  if (spec.speaker_bias && speaker != kNoSpeaker && pg.have(spec.name + ".bf")) {
    ad::Var bf = pg(spec.name + ".bf");
    if (speaker < 0 || speaker >= bf->value.rows())
      throw ModelError("speaker index out of range for layer " + spec.name);
    f = ad::add_row_bias(f, ad::gather_rows(bf, {speaker}));
    g = ad::add_row_bias(g, ad::gather_rows(pg(spec.name + ".bg"), {speaker}));
  }
  return ad::mul(ad::tanh_v(f), ad::sigmoid_v(g));
}

ad::Var hw_layer(ad::ParamGraph& pg, const LayerSpec& spec, const ad::Var& x) {
  if (x->value.cols() != spec.channels)
    throw ModelError("highway layer " + spec.name + " requires a square map");
  ad::Var hf = ad::matmul(x, pg(spec.name + ".Wf"));
  ad::Var hg = ad::sigmoid_v(ad::matmul(x, pg(spec.name + ".Wg")));
  return ad::add(ad::mul(hf, hg), ad::mul(x, ad::affine(hg, -1.0, 1.0)));
}

ad::Var qrnn_layer(ad::ParamGraph& pg, const LayerSpec& spec, const ad::Var& x) {
  auto direction = [&](const char* dir, const ad::Var& in) {
    const std::string base = spec.name + dir;
    ad::Var cand = ad::tanh_v(conv3(pg, base, "c", in, spec.dilation, true));
    ad::Var forget = ad::sigmoid_v(conv3(pg, base, "f", in, spec.dilation, true));
    return ad::fo_scan(forget, cand);
  };
  ad::Var fwd = direction(".fwd", x);
  ad::Var bwd = ad::reverse_rows(direction(".bwd", ad::reverse_rows(x)));
  return ad::concat_cols(fwd, bwd);
}

ad::Var std_from_raw(const ad::Var& raw) {
  return ad::exp_v(ad::affine(raw, 0.5, 0.0));
}

ad::Var reparam(const Dist& d, const Mat* noise) {
  if (!noise) return d.mu;
  return ad::add(d.mu, ad::mul_const(std_from_raw(d.raw), *noise));
}

Dist tenc(ad::ParamGraph& pg, const ArchManifest& arch, const PhonemeTranscript& t,
          const DropoutPlan& drop) {
  t.validate(arch.phonemes);
  NetLayers n = collect(arch, "tenc.");
  const int phones = static_cast<int>(t.ids.size());
  Mat onehot = Mat::Zero(phones, arch.phonemes);
  for (int i = 0; i < phones; ++i) onehot(i, t.ids[i]) = 1.0;

  ad::Var h = ad::constant(onehot);
  for (const auto* l : n.ctx) {
    h = l->type == LayerType::QRNN ? qrnn_layer(pg, *l, h) : fg_layer(pg, *l, h, kNoSpeaker);
    h = drop.apply(h, l->name);
  }

  std::vector<int> frame_map;
  frame_map.reserve(static_cast<std::size_t>(t.total_frames()));
  for (int i = 0; i < phones; ++i)
    frame_map.insert(frame_map.end(), static_cast<std::size_t>(t.durations[i]), i);
  h = ad::gather_rows(h, frame_map);

  for (const auto* l : n.stack) {
    h = fg_layer(pg, *l, h, kNoSpeaker);
    h = drop.apply(h, l->name);
  }
  return {dense(pg, n.mu->name, h), dense(pg, n.logvar->name, h)};
}

Dist senc(ad::ParamGraph& pg, const ArchManifest& arch, const ad::Var& mel,
          const DropoutPlan& drop) {
  if (mel->value.cols() != arch.mel_dim)
    throw ModelError("speech encoder expects mel dimension " +
                     std::to_string(arch.mel_dim));
  NetLayers n = collect(arch, "senc.");
  ad::Var h = mel;
  for (const auto* l : n.stack) {
    h = fg_layer(pg, *l, h, kNoSpeaker);
    h = drop.apply(h, l->name);
  }
  return {dense(pg, n.mu->name, h), dense(pg, n.logvar->name, h)};
}

ad::Var sdec(ad::ParamGraph& pg, const ArchManifest& arch, const ad::Var& z,
             int speaker, const ad::Var& mel_for_past, const DropoutPlan& drop) {
  if (z->value.cols() != arch.latent) throw ModelError("decoder expects latent width");
  if (mel_for_past->value.cols() != arch.mel_dim)
    throw ModelError("decoder expects mel dimension " + std::to_string(arch.mel_dim));
  if (z->value.rows() != mel_for_past->value.rows())
    throw ModelError("decoder z and past frames must share length");
  NetLayers n = collect(arch, "sdec.");

  ad::Var ctx = z;
  for (const auto* l : n.ctx) {
    ctx = fg_layer(pg, *l, ctx, speaker);
    ctx = drop.apply(ctx, l->name);
  }

  ad::Var past = ad::shift_rows(mel_for_past, 1);
  ad::Var h = dense(pg, n.pre->name, past);
  for (const auto* l : n.hw) {
    h = hw_layer(pg, *l, h);
    h = drop.apply(h, l->name);
  }

  ad::Var m = ad::concat_cols(ctx, h);
  for (const auto* l : n.mrg) {
    m = fg_layer(pg, *l, m, kNoSpeaker);
    m = drop.apply(m, l->name);
  }
  return dense(pg, n.out->name, m);
}

ad::Var tdec(ad::ParamGraph& pg, const ArchManifest& arch, const ad::Var& z,
             const DropoutPlan& drop) {
  if (z->value.cols() != arch.latent) throw ModelError("text decoder expects latent width");
  NetLayers n = collect(arch, "tdec.");
  ad::Var h = z;
  for (const auto* l : n.stack) {
    h = fg_layer(pg, *l, h, kNoSpeaker);
    h = drop.apply(h, l->name);
  }
  return ad::softmax_rows(dense(pg, n.out->name, h));
}

}  // namespace graph

namespace {

const DropoutPlan kEval{};

ad::ParamGraph frozen_graph(const Model& model) {
  return ad::ParamGraph(model.params.values, [](const std::string&) { return false; });
}

LLEDistribution dist_values(const graph::Dist& d) {
  LLEDistribution out;
  out.mean = d.mu->value;
  out.std = (d.raw->value.array() / 2.0).exp().matrix();
  return out;
}

}  // namespace

LLEDistribution text_encoder_forward(const Model& model, const PhonemeTranscript& t) {
  ad::ParamGraph pg = frozen_graph(model);
  return dist_values(graph::tenc(pg, model.arch, t, kEval));
}

LLEDistribution speech_encoder_forward(const Model& model, const MelMatrix& mel) {
  ad::ParamGraph pg = frozen_graph(model);
  return dist_values(graph::senc(pg, model.arch, ad::constant(mel.values), kEval));
}

LLESequence reparameterize(const LLEDistribution& dist, const std::optional<Mat>& noise) {
  if (!noise) return {dist.mean};
  if (noise->rows() != dist.mean.rows() || noise->cols() != dist.mean.cols())
    throw ModelError("noise shape does not match the distribution");
  return {dist.mean + dist.std.cwiseProduct(*noise)};
}

MelMatrix speech_decoder_forward(const Model& model, const LLESequence& z, int speaker,
                                 const std::optional<Mat>& past_mel) {
  MelMatrix out;
  const Eigen::Index t = z.z.rows();
  if (past_mel) {
    if (past_mel->rows() != t) throw ModelError("teacher frames must match z length");
    ad::ParamGraph pg = frozen_graph(model);
    out.values = graph::sdec(pg, model.arch, ad::constant(z.z), speaker,
                             ad::constant(*past_mel), kEval)
                     ->value;
    return out;
  }
  Mat committed = Mat::Zero(t, model.arch.mel_dim);
  for (Eigen::Index i = 0; i < t; ++i) {
    ad::ParamGraph pg = frozen_graph(model);
    Mat step = graph::sdec(pg, model.arch, ad::constant(z.z), speaker,
                           ad::constant(committed), kEval)
                   ->value;
    committed.row(i) = step.row(i);
  }
  out.values = committed;
  return out;
}

Mat text_decoder_forward(const Model& model, const LLESequence& z) {
  ad::ParamGraph pg = frozen_graph(model);
  return graph::tdec(pg, model.arch, ad::constant(z.z), kEval)->value;
}

void remove_speaker_biases(ParamStore& params, const ArchManifest& arch,
                           const std::string& prefix) {
  for (const auto& l : arch.layers) {
    if (!starts_with(l.name, prefix) || l.type != LayerType::FGS) continue;
    params.values.erase(l.name + ".bf");
    params.values.erase(l.name + ".bg");
  }
}

bool has_speaker_biases(const ParamStore& params, const ArchManifest& arch,
                        const std::string& prefix) {
  for (const auto& l : arch.layers)
    if (starts_with(l.name, prefix) && l.type == LayerType::FGS &&
        params.has(l.name + ".bf"))
      return true;
  return false;
}

std::string network_hash(const ParamStore& params, const std::string& prefix) {
  ParamStore sub;
  for (const auto& [name, m] : params.values)
    if (starts_with(name, prefix)) sub.values.emplace(name, m);
  return params_hash(sub);
}

}  // namespace nautilus
