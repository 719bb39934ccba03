#include "nautilus/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "nautilus/errors.hpp"

namespace nautilus {

namespace {

void check_same_shape(const Mat& a, const Mat& b, const std::string& what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw LossError(what + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                    std::to_string(b.cols()));
}

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {alpha_sts, alpha_stt, beta, gamma, alpha_sup})
    if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
}

const std::vector<std::string>& LossReport::canonical_names() {
  static const std::vector<std::string> names = {
      "tts",  "sts",   "stt", "ttt",   "tie_fwd", "tie_bwd", "tie",
      "cycle", "voc",  "goals", "train", "adapt",  "weld"};
  return names;
}

void LossReport::set(const std::string& name, double v) {
  const auto& names = canonical_names();
  if (std::find(names.begin(), names.end(), name) == names.end())
    throw LossError("unknown loss term: " + name);
  if (!std::isfinite(v)) throw LossError("loss term " + name + " is not finite");
  values[name] = v;
}

double LossReport::at(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) throw LossError("missing loss term: " + name);
  return it->second;
}

std::string LossReport::line() const {
  std::string out = "step=" + std::to_string(step);
  for (const auto& name : canonical_names())
    if (auto it = values.find(name); it != values.end())
      out += " " + name + "=" + format_value(it->second);
  return out;
}

LossReport LossReport::parse_line(const std::string& line) {
  LossReport r;
  std::istringstream in(line);
  std::string token;
  bool saw_step = false;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw LossError("malformed curve token: " + token);
    const std::string key = token.substr(0, eq);
    const std::string val = token.substr(eq + 1);
    try {
      if (key == "step") {
        r.step = std::stoull(val);
        saw_step = true;
      } else {
        r.set(key, std::stod(val));
      }
    } catch (const std::invalid_argument&) {
      throw LossError("malformed curve value: " + token);
    } catch (const std::out_of_range&) {
      throw LossError("curve value out of range: " + token);
    }
  }
  if (!saw_step) throw LossError("curve line lacks a step field: " + line);
  return r;
}

double mae(const Mat& pred, const Mat& target) {
  check_same_shape(pred, target, "mae");
  return (pred - target).cwiseAbs().mean();
}

double frame_ce(const Mat& posteriors, const std::vector<int>& labels, double clamp) {
  if (static_cast<Eigen::Index>(labels.size()) != posteriors.rows())
    throw LossError("frame_ce: " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(posteriors.rows()) + " frames");
  double total = 0.0;
  for (Eigen::Index t = 0; t < posteriors.rows(); ++t) {
    const int label = labels[static_cast<std::size_t>(t)];
    if (label < 0 || label >= posteriors.cols())
      throw LossError("frame_ce: label " + std::to_string(label) + " outside " +
                      std::to_string(posteriors.cols()) + " classes");
    total -= std::log(std::max(posteriors(t, label), clamp));
  }
  return total / static_cast<double>(posteriors.rows());
}

double kld_gaussian(const LLEDistribution& p, const LLEDistribution& q) {
  check_same_shape(p.mean, q.mean, "kld_gaussian mean");
  check_same_shape(p.std, q.std, "kld_gaussian std");
  check_same_shape(p.mean, p.std, "kld_gaussian operand");
  double total = 0.0;
  for (Eigen::Index t = 0; t < p.mean.rows(); ++t)
    for (Eigen::Index d = 0; d < p.mean.cols(); ++d) {
      const double sp = p.std(t, d);
      const double sq = q.std(t, d);
      const double dm = p.mean(t, d) - q.mean(t, d);
      total += std::log(sq / sp) + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5;
    }
  return total / static_cast<double>(p.mean.size());
}

double loss_tie(const LLEDistribution& tenc_out, const LLEDistribution& senc_out) {
  return 0.5 * kld_gaussian(tenc_out, senc_out) + 0.5 * kld_gaussian(senc_out, tenc_out);
}

double loss_goals(const LossReport& report, const LossWeights& w) {
  return report.at("tts") + w.alpha_sts * report.at("sts") +
         w.alpha_stt * report.at("stt");
}

double loss_train(double goals, double tie, const LossWeights& w) {
  return goals + w.beta * tie;
}

double loss_cycle(const LLEDistribution& senc_natural,
                  const LLEDistribution& senc_recon) {
  return 0.5 * kld_gaussian(senc_natural, senc_recon) +
         0.5 * kld_gaussian(senc_recon, senc_natural);
}

double loss_adapt_unsup(double sts, double cycle, const LossWeights& w) {
  return sts + w.beta * cycle;
}

double loss_adapt_sup(double tts, double sts, double tie, const LossWeights& w) {
  return tts + w.alpha_sup * sts + w.beta * tie;
}

double loss_weld(double sts, double voc, const LossWeights& w) {
  return sts + w.gamma * voc;
}

namespace graph {

ad::Var mae_g(const ad::Var& pred, const Mat& target) {
  if (pred->value.rows() != target.rows() || pred->value.cols() != target.cols())
    throw LossError("mae_g: shape mismatch");
  return ad::mean_all(ad::abs_v(ad::sub(pred, ad::constant(target))));
}

ad::Var kld_g(const Dist& p, const Dist& q) {
  if (p.mu->value.rows() != q.mu->value.rows() ||
      p.mu->value.cols() != q.mu->value.cols())
    throw LossError("kld_g: shape mismatch");
  ad::Var half_raw = ad::affine(ad::sub(q.raw, p.raw), 0.5, 0.0);
  ad::Var numer = ad::add(ad::exp_v(p.raw), ad::square_v(ad::sub(p.mu, q.mu)));
  ad::Var ratio = ad::mul(numer, ad::exp_v(ad::affine(q.raw, -1.0, 0.0)));
  return ad::mean_all(ad::add(half_raw, ad::affine(ratio, 0.5, -0.5)));
}

ad::Var tie_g(const Dist& a, const Dist& b) {
  return ad::affine(ad::add(kld_g(a, b), kld_g(b, a)), 0.5, 0.0);
}

}  // namespace graph

}  // namespace nautilus
