#include "nautilus/vocoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nautilus/errors.hpp"
#include "nautilus/optim.hpp"

namespace nautilus {

namespace {

bool is_block(const std::string& name) { return name.rfind("voc.l", 0) == 0; }

void validate_record_for_vocoder(const UtteranceRecord& rec, const ArchManifest& arch) {
  if (rec.mel.dim() != arch.mel_dim)
    throw DataError("utterance " + rec.utterance_id + " mel dim " +
                    std::to_string(rec.mel.dim()) + " does not match model " +
                    std::to_string(arch.mel_dim));
  if (static_cast<int>(rec.waveform.quantization) != arch.quantization)
    throw DataError("utterance " + rec.utterance_id + " quantization mismatch");
  if (static_cast<int>(rec.waveform.codes.size()) !=
      rec.mel.frames() * arch.samples_per_frame)
    throw DataError("utterance " + rec.utterance_id +
                    " codes do not cover mel frames");
}

}  // namespace

Vocoder Vocoder::init(const ArchManifest& arch, std::vector<std::string> speaker_ids,
                      std::uint64_t seed) {
  arch.validate();
  if (static_cast<int>(speaker_ids.size()) != arch.speakers)
    throw ConfigError("speaker id list does not match manifest speaker count");
  Vocoder v;
  v.arch = arch;
  v.speaker_ids = std::move(speaker_ids);
  Rng rng = Rng::stream(seed, "voc.init");
  init_network_params(v.params, arch, "voc.", rng);
  return v;
}

int Vocoder::speaker_index(const std::string& id) const {
  auto it = std::find(speaker_ids.begin(), speaker_ids.end(), id);
  if (it == speaker_ids.end()) throw ModelError("unknown speaker id: " + id);
  return static_cast<int>(it - speaker_ids.begin());
}

std::array<std::uint8_t, 32> Vocoder::config_hash() const {
  return sha256("vocoder\n" + arch.serialize());
}

std::vector<VocBatchItem> voc_epoch_plan(std::uint64_t seed, int epoch,
                                         const std::vector<int>& frame_counts,
                                         int segment_frames) {
  std::vector<int> order(frame_counts.size());
  std::iota(order.begin(), order.end(), 0);
  Rng order_rng = Rng::stream(seed, "voc.order", static_cast<std::uint64_t>(epoch));
  order_rng.shuffle(order);
  Rng seg_rng = Rng::stream(seed, "voc.segment", static_cast<std::uint64_t>(epoch));
  std::vector<VocBatchItem> plan;
  plan.reserve(order.size());
  for (int rec : order) {
    const int frames = frame_counts[static_cast<std::size_t>(rec)];
    VocBatchItem item;
    item.record = rec;
    if (frames <= segment_frames) {
      item.start_frame = 0;
      item.frames = frames;
    } else {
      item.start_frame = seg_rng.uniform_int(frames - segment_frames + 1);
      item.frames = segment_frames;
    }
    plan.push_back(item);
  }
  return plan;
}

namespace graph {

ad::Var voc(ad::ParamGraph& pg, const ArchManifest& arch,
            const std::vector<int>& prev_ids, const ad::Var& cond,
            const std::vector<int>& frame_map, int speaker) {
  if (prev_ids.size() != frame_map.size())
    throw ModelError("vocoder graph: prev ids and frame map lengths differ");
  for (int id : prev_ids)
    if (id >= arch.quantization) throw ModelError("vocoder graph: code id out of range");
  for (int f : frame_map)
    if (f < 0 || f >= cond->value.rows())
      throw ModelError("vocoder graph: frame map outside conditioning window");

  ad::Var emb =
      ad::add_row_bias(ad::gather_rows(pg("voc.embed.W"), prev_ids), pg("voc.embed.b"));
  ad::Var cproj = dense(pg, "voc.cond", cond);
  ad::Var x = ad::add(emb, ad::gather_rows(cproj, frame_map));
  ad::Var skip;
  for (const auto& l : arch.layers) {
    if (!is_block(l.name)) continue;
    ad::Var gated = fg_layer(pg, l, x, speaker);
    ad::Var s = ad::matmul(gated, pg(l.name + ".Ws"));
    skip = skip ? ad::add(skip, s) : s;
    x = ad::add(x, ad::matmul(gated, pg(l.name + ".Wr")));
  }
  ad::Var h = ad::tanh_v(dense(pg, "voc.post0", skip));
  return ad::softmax_rows(dense(pg, "voc.post1", h));
}

}  // namespace graph

Mat vocoder_forward(const Vocoder& v, const WaveCodes& codes, const MelMatrix& mel,
                    int speaker) {
  if (mel.dim() != v.arch.mel_dim)
    throw ModelError("vocoder: mel dim " + std::to_string(mel.dim()) +
                     " does not match model " + std::to_string(v.arch.mel_dim));
  const int spf = v.arch.samples_per_frame;
  const int n = static_cast<int>(codes.codes.size());
  if (n != mel.frames() * spf)
    throw ModelError("vocoder: " + std::to_string(n) + " codes for " +
                     std::to_string(mel.frames()) + " frames of " +
                     std::to_string(spf) + " samples");
  if (speaker != kNoSpeaker && (speaker < 0 || speaker >= v.arch.speakers))
    throw ModelError("vocoder: speaker index out of range");

  std::vector<int> prev_ids(static_cast<std::size_t>(n));
  std::vector<int> frame_map(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    prev_ids[static_cast<std::size_t>(i)] =
        i == 0 ? -1 : static_cast<int>(codes.codes[static_cast<std::size_t>(i - 1)]);
    frame_map[static_cast<std::size_t>(i)] = i / spf;
  }
  ad::ParamGraph pg(v.params.values, [](const std::string&) { return false; });
  return graph::voc(pg, v.arch, prev_ids, ad::constant(mel.values), frame_map, speaker)
      ->value;
}

double loss_voc(const Mat& posteriors, const WaveCodes& codes) {
  std::vector<int> labels(codes.codes.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = static_cast<int>(codes.codes[i]);
  return frame_ce(posteriors, labels);
}

WaveCodes vocoder_generate(const Vocoder& v, const MelMatrix& mel, int speaker,
                           std::uint64_t seed, GenMode mode) {
  if (mel.dim() != v.arch.mel_dim)
    throw ModelError("vocoder: mel dim does not match model");
  if (speaker != kNoSpeaker && (speaker < 0 || speaker >= v.arch.speakers))
    throw ModelError("vocoder: speaker index out of range");
  const auto& values = v.params.values;
  const int spf = v.arch.samples_per_frame;
  const int total = mel.frames() * spf;
  const int width = v.arch.find("voc.post0")->channels;

  // Frame-rate conditioning rows, computed once.
  const Mat cond = ((mel.values * values.at("voc.cond.W")).rowwise() +
                    values.at("voc.cond.b").row(0))
                       .eval();

  struct Block {
    const LayerSpec* spec;
    Mat ring;  // input history, 2*dilation + 1 rows
    Eigen::RowVectorXd bf, bg;
    bool biased = false;
  };
  std::vector<Block> blocks;
  for (const auto& l : v.arch.layers) {
    if (!is_block(l.name)) continue;
    Block b;
    b.spec = &l;
    b.ring = Mat::Zero(2 * l.dilation + 1, width);
    if (speaker != kNoSpeaker && values.count(l.name + ".bf") > 0) {
      b.bf = values.at(l.name + ".bf").row(speaker);
      b.bg = values.at(l.name + ".bg").row(speaker);
      b.biased = true;
    }
    blocks.push_back(std::move(b));
  }

  const Mat& w_emb = values.at("voc.embed.W");
  const Eigen::RowVectorXd b_emb = values.at("voc.embed.b").row(0);
  const Mat& w_post0 = values.at("voc.post0.W");
  const Eigen::RowVectorXd b_post0 = values.at("voc.post0.b").row(0);
  const Mat& w_post1 = values.at("voc.post1.W");
  const Eigen::RowVectorXd b_post1 = values.at("voc.post1.b").row(0);

  Rng rng = Rng::stream(seed, "voc.generate");
  WaveCodes out;
  out.quantization = static_cast<std::uint32_t>(v.arch.quantization);
  out.sample_rate = static_cast<std::uint32_t>(
      std::lround(mel.frame_shift_ms > 0.0 ? spf * 1000.0 / mel.frame_shift_ms : 0.0));
  out.codes.reserve(static_cast<std::size_t>(total));

  int prev = -1;
  for (int n = 0; n < total; ++n) {
    Eigen::RowVectorXd row = b_emb;
    if (prev >= 0) row += w_emb.row(prev);
    row += cond.row(n / spf);

    Eigen::RowVectorXd skip = Eigen::RowVectorXd::Zero(width);
    for (auto& b : blocks) {
      const int d = b.spec->dilation;
      const int size = 2 * d + 1;
      b.ring.row(n % size) = row;
      auto tap = [&](int offset) -> Eigen::RowVectorXd {
        const int idx = n - offset;
        if (idx < 0) return Eigen::RowVectorXd::Zero(width);
        return b.ring.row(idx % size);
      };
      Eigen::RowVectorXd f = tap(2 * d) * values.at(b.spec->name + ".Wf0") +
                             tap(d) * values.at(b.spec->name + ".Wf1") +
                             row * values.at(b.spec->name + ".Wf2") +
                             values.at(b.spec->name + ".cf").row(0);
      Eigen::RowVectorXd g = tap(2 * d) * values.at(b.spec->name + ".Wg0") +
                             tap(d) * values.at(b.spec->name + ".Wg1") +
                             row * values.at(b.spec->name + ".Wg2") +
                             values.at(b.spec->name + ".cg").row(0);
      if (b.biased) {
        f += b.bf;
        g += b.bg;
      }
      const Eigen::RowVectorXd gated =
          f.array().tanh() * (1.0 / (1.0 + (-g.array()).exp()));
      skip += gated * values.at(b.spec->name + ".Ws");
      row += gated * values.at(b.spec->name + ".Wr");
    }

    const Eigen::RowVectorXd h = (skip * w_post0 + b_post0).array().tanh();
    Eigen::RowVectorXd logits = h * w_post1 + b_post1;
    const double m = logits.maxCoeff();
    Eigen::RowVectorXd probs = (logits.array() - m).exp();
    probs /= probs.sum();

    int code = 0;
    if (mode == GenMode::kArgmax) {
      Eigen::Index best = 0;
      probs.maxCoeff(&best);
      code = static_cast<int>(best);
    } else {
      const double u = rng.uniform();
      double acc = 0.0;
      code = static_cast<int>(probs.size()) - 1;
      for (Eigen::Index q = 0; q < probs.size(); ++q) {
        acc += probs(q);
        if (u < acc) {
          code = static_cast<int>(q);
          break;
        }
      }
    }
    out.codes.push_back(static_cast<std::uint16_t>(code));
    prev = code;
  }
  return out;
}

std::vector<LossReport> adapt_vocoder(Vocoder& v,
                                      const std::vector<UtteranceRecord>& slice,
                                      const VocoderTrainConfig& cfg) {
  if (slice.empty()) throw DataError("vocoder adaptation needs at least one utterance");
  for (const auto& rec : slice) validate_record_for_vocoder(rec, v.arch);
  if (cfg.epochs < 0 || cfg.batch_size < 1 || cfg.segment_frames < 1)
    throw ConfigError("vocoder adaptation config out of range");

  remove_speaker_biases(v.params, v.arch, "voc.");
  v.params.flags |= kStageAdaptedVocoder;

  std::vector<int> frame_counts;
  frame_counts.reserve(slice.size());
  for (const auto& rec : slice) frame_counts.push_back(rec.mel.frames());

  Adam adam(AdamConfig{cfg.learning_rate});
  const int spf = v.arch.samples_per_frame;
  std::vector<LossReport> curves;
  curves.reserve(static_cast<std::size_t>(cfg.epochs));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto plan = voc_epoch_plan(cfg.seed, epoch, frame_counts, cfg.segment_frames);
    double total = 0.0;
    int count = 0;
    for (std::size_t b = 0; b < plan.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(plan.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const double inv = 1.0 / static_cast<double>(end - b);
      std::map<std::string, Mat> accum;
      for (std::size_t i = b; i < end; ++i) {
        const VocBatchItem& item = plan[i];
        const UtteranceRecord& rec = slice[static_cast<std::size_t>(item.record)];
        const int s0 = item.start_frame * spf;
        const int n = item.frames * spf;
        std::vector<int> prev_ids(static_cast<std::size_t>(n));
        std::vector<int> labels(static_cast<std::size_t>(n));
        std::vector<int> frame_map(static_cast<std::size_t>(n));
        for (int s = 0; s < n; ++s) {
          const int gs = s0 + s;
          prev_ids[static_cast<std::size_t>(s)] =
              gs == 0 ? -1 : static_cast<int>(rec.waveform.codes[static_cast<std::size_t>(gs - 1)]);
          labels[static_cast<std::size_t>(s)] =
              static_cast<int>(rec.waveform.codes[static_cast<std::size_t>(gs)]);
          frame_map[static_cast<std::size_t>(s)] = s / spf;
        }
        ad::ParamGraph pg(v.params.values);
        ad::Var cond = ad::constant(rec.mel.values.middleRows(item.start_frame, item.frames));
        ad::Var probs = graph::voc(pg, v.arch, prev_ids, cond, frame_map, kNoSpeaker);
        ad::Var ce = ad::ce_rows(probs, labels);
        ad::backward(ad::affine(ce, inv, 0.0));
        total += ad::scalar(ce);
        ++count;
        for (auto& [name, g] : pg.grads()) {
          auto it = accum.find(name);
          if (it == accum.end())
            accum.emplace(name, g);
          else
            it->second += g;
        }
      }
      adam.step(v.params.values, accum);
      ++v.params.step;
    }
    LossReport r;
    r.step = static_cast<std::uint64_t>(epoch);
    r.set("voc", total / std::max(count, 1));
    curves.push_back(r);
  }
  return curves;
}

}  // namespace nautilus
