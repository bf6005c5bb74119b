#include "mvr/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvr {

namespace {

void check_tau(double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be > 0");
}

// log(sum exp(x_i)) with the max shifted out.
double log_sum_exp(std::span<const double> xs) {
  const double mx = *std::max_element(xs.begin(), xs.end());
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

std::vector<double> scaled_logits(const ScoreBreakdown& pos, std::span<const ScoreBreakdown> negs, double tau) {
  std::vector<double> logits;
  logits.reserve(negs.size() + 1);
  logits.push_back(pos.aggregate / tau);
  for (const auto& n : negs) logits.push_back(n.aggregate / tau);
  return logits;
}

}  // namespace

std::vector<double> individual_scores(std::span<const double> query, const Matrix& doc_views) {
  if (query.size() != doc_views.cols()) {
    throw std::invalid_argument("individual_scores: query dim " + std::to_string(query.size()) +
                                " != view dim " + std::to_string(doc_views.cols()));
  }
  std::vector<double> out(doc_views.rows());
  for (std::size_t i = 0; i < doc_views.rows(); ++i) out[i] = dot(query, doc_views.row(i));
  return out;
}

ScoreBreakdown aggregate_score(std::vector<double> scores) {
  if (scores.empty()) throw std::invalid_argument("aggregate_score: no scores");
  ScoreBreakdown b;
  b.best_viewer = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[b.best_viewer]) b.best_viewer = i;
  }
  b.aggregate = scores[b.best_viewer];
  b.individual = std::move(scores);
  return b;
}

double global_loss(const ScoreBreakdown& pos, std::span<const ScoreBreakdown> negs, double tau) {
  check_tau(tau);
  if (negs.empty()) return 0.0;
  auto logits = scaled_logits(pos, negs, tau);
  return log_sum_exp(logits) - logits.front();
}

double local_loss(const ScoreBreakdown& pos, double tau) {
  check_tau(tau);
  if (pos.individual.empty()) throw std::invalid_argument("local_loss: no viewer scores");
  if (pos.individual.size() == 1) return 0.0;
  std::vector<double> logits(pos.individual.size());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = pos.individual[i] / tau;
  return log_sum_exp(logits) - pos.aggregate / tau;
}

double combined_loss(double global, double local, double lambda) { return global + lambda * local; }

GlobalLossGrad global_loss_grad(const ScoreBreakdown& pos, std::span<const ScoreBreakdown> negs, double tau) {
  check_tau(tau);
  GlobalLossGrad g;
  g.d_negatives.assign(negs.size(), 0.0);
  if (negs.empty()) return g;
  auto logits = scaled_logits(pos, negs, tau);
  const double lse = log_sum_exp(logits);
  g.loss = lse - logits.front();
  g.d_positive = (std::exp(logits.front() - lse) - 1.0) / tau;
  for (std::size_t l = 0; l < negs.size(); ++l) g.d_negatives[l] = std::exp(logits[l + 1] - lse) / tau;
  return g;
}

LocalLossGrad local_loss_grad(const ScoreBreakdown& pos, double tau) {
  check_tau(tau);
  LocalLossGrad g;
  const std::size_t k = pos.individual.size();
  g.d_individual.assign(k, 0.0);
  if (k <= 1) return g;
  std::vector<double> logits(k);
  for (std::size_t i = 0; i < k; ++i) logits[i] = pos.individual[i] / tau;
  const double lse = log_sum_exp(logits);
  g.loss = lse - pos.aggregate / tau;
  for (std::size_t i = 0; i < k; ++i) g.d_individual[i] = std::exp(logits[i] - lse) / tau;
  g.d_individual[pos.best_viewer] -= 1.0 / tau;
  return g;
}

void LossConfig::validate() const {
  if (!std::isfinite(lambda) || lambda < 0.0) throw std::invalid_argument("loss config: lambda must be finite and >= 0");
  if (!std::isfinite(alpha) || alpha < 0.0) throw std::invalid_argument("loss config: alpha must be >= 0");
  if (!(tau_floor > 0.0) || tau_floor > 1.0) throw std::invalid_argument("loss config: tau_floor must be in (0, 1]");
  if (tau_mode == TauMode::fixed && !(fixed_tau > 0.0)) {
    throw std::invalid_argument("loss config: fixed tau must be > 0");
  }
}

std::string to_string(TauMode mode) { return mode == TauMode::annealed ? "annealed" : "fixed"; }

TauMode parse_tau_mode(std::string_view text) {
  if (text == "annealed") return TauMode::annealed;
  if (text == "fixed") return TauMode::fixed;
  throw std::invalid_argument("unknown tau mode: " + std::string(text));
}

TemperatureSchedule::TemperatureSchedule(const LossConfig& cfg)
    : mode_(cfg.tau_mode), alpha_(cfg.alpha), floor_(cfg.tau_floor), fixed_(cfg.fixed_tau) {
  cfg.validate();
}

TemperatureSchedule TemperatureSchedule::annealed(double alpha, double floor) {
  LossConfig cfg;
  cfg.alpha = alpha;
  cfg.tau_floor = floor;
  return TemperatureSchedule(cfg);
}

TemperatureSchedule TemperatureSchedule::fixed(double tau) {
  LossConfig cfg;
  cfg.tau_mode = TauMode::fixed;
  cfg.fixed_tau = tau;
  return TemperatureSchedule(cfg);
}

double TemperatureSchedule::at(std::size_t epoch) const {
  if (mode_ == TauMode::fixed) return fixed_;
  return std::max(floor_, std::exp(-alpha_ * static_cast<double>(epoch)));
}

double temperature_at(const TemperatureSchedule& schedule, std::size_t epoch) { return schedule.at(epoch); }

}  // namespace mvr
