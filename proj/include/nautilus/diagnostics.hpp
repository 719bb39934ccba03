#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nautilus/losses.hpp"
#include "nautilus/net.hpp"
#include "nautilus/pipeline.hpp"

namespace nautilus {

// Append-only training-curve log, one LossReport line per step. Step numbers
// must strictly increase, including across reopens of the same file.
class CurveLog {
 public:
  explicit CurveLog(const std::string& path);
  void append(const LossReport& report);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  bool have_last_ = false;
  std::uint64_t last_step_ = 0;
};

std::vector<LossReport> load_curves(const std::string& path);

enum class LLESource { kText, kSpeech };

// Full-precision encoder statistics for one utterance, with enough metadata
// to pair dumps across encoders and cloning variants.
struct LLEDump {
  std::string speaker_id;
  std::string utterance_id;
  std::string variant;
  LLESource source = LLESource::kText;
  Mat mean;  // T x Z
  Mat std;   // T x Z

  int frames() const { return static_cast<int>(mean.rows()); }
  int dims() const { return static_cast<int>(mean.cols()); }
};

LLEDump dump_lle(const Model& model, const UtteranceRecord& utt, LLESource which,
                 const std::string& variant);
void save_lle_dump(const LLEDump& dump, const std::string& path);
LLEDump load_lle_dump(const std::string& path);

struct LLEComparison {
  std::vector<double> per_frame;  // symmetrized KLD per frame
  double mean = 0.0;              // equals loss_tie over the dumps
};

LLEComparison lle_compare(const LLEDump& a, const LLEDump& b);

// Frame-level misclassification rate of the text decoder on speech-encoded
// mean latents; the desk-scale stand-in for an external recognizer.
double phoneme_error_rate(const Model& model,
                          const std::vector<UtteranceRecord>& records);

struct AblationRow {
  std::string setup;
  std::string description;
  double per_tts = 0.0;
  double per_vc = 0.0;
  double mel_mae = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;       // N, A, B, C, D
  bool audit_passed = false;           // configs differ only by declared toggles
  std::vector<std::string> audit_log;  // one line per setup
  std::string tsv() const;             // header row plus one row per setup
};

// Trains two shared bases (with and without the text decoder), clones each
// setup onto the target slice, and scores synthesis with the full model as
// judge. The first half of the slice adapts, the rest evaluates against
// parallel sources drawn from the corpus.
AblationResult run_ablation_matrix(const ArchManifest& arch, const Corpus& corpus,
                                   const std::vector<UtteranceRecord>& target_slice,
                                   const StageConfig& base);

}  // namespace nautilus
