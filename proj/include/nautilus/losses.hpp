#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nautilus/net.hpp"

namespace nautilus {

struct LossWeights {
  double alpha_sts = 0.1;
  double alpha_stt = 0.1;
  double beta = 0.25;
  double gamma = 0.01;
  double alpha_sup = 0.1;

  void validate() const;  // ConfigError on a negative weight
};

// Named loss values for one optimization step. Serializes to a single curve
// line; only names from the canonical list are accepted.
struct LossReport {
  std::uint64_t step = 0;
  std::map<std::string, double> values;

  static const std::vector<std::string>& canonical_names();
  void set(const std::string& name, double v);
  bool has(const std::string& name) const { return values.count(name) > 0; }
  double at(const std::string& name) const;
  std::string line() const;
  static LossReport parse_line(const std::string& line);
};

double mae(const Mat& pred, const Mat& target);
double frame_ce(const Mat& posteriors, const std::vector<int>& labels,
                double clamp = 1e-8);
// KLD(p || q) for diagonal Gaussians, mean over frames and dims.
double kld_gaussian(const LLEDistribution& p, const LLEDistribution& q);
double loss_tie(const LLEDistribution& tenc_out, const LLEDistribution& senc_out);
double loss_goals(const LossReport& report, const LossWeights& w);
double loss_train(double goals, double tie, const LossWeights& w);
double loss_cycle(const LLEDistribution& senc_natural,
                  const LLEDistribution& senc_recon);
double loss_adapt_unsup(double sts, double cycle, const LossWeights& w);
double loss_adapt_sup(double tts, double sts, double tie, const LossWeights& w);
double loss_weld(double sts, double voc, const LossWeights& w);

// Differentiable counterparts used by the trainers. The KLD runs on the raw
// log-variance so no positivity constraint is needed in the graph.
namespace graph {

ad::Var mae_g(const ad::Var& pred, const Mat& target);
ad::Var kld_g(const Dist& p, const Dist& q);
ad::Var tie_g(const Dist& a, const Dist& b);

}  // namespace graph

}  // namespace nautilus
