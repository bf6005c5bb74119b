#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mvr/tensor.hpp"

namespace mvr {

// Individual scores f_i(q, d), the winning viewer and the aggregate max.
struct ScoreBreakdown {
  std::vector<double> individual;
  std::size_t best_viewer = 0;
  double aggregate = 0.0;
};

// Entry i = <query, doc_views.row(i)>. Throws on dimension mismatch.
std::vector<double> individual_scores(std::span<const double> query, const Matrix& doc_views);

// Max-pooling with lowest-index tie-break. Throws on empty input.
ScoreBreakdown aggregate_score(std::vector<double> scores);

// -log softmax of the positive's aggregate score against the negatives'
// aggregates at temperature tau. Zero without negatives.
double global_loss(const ScoreBreakdown& pos, std::span<const ScoreBreakdown> negs, double tau);

// -log of the winning viewer's share of the softmax over the positive
// document's own viewer scores.
double local_loss(const ScoreBreakdown& pos, double tau);

double combined_loss(double global, double local, double lambda);

// Derivatives of global_loss w.r.t. the positive and each negative aggregate score.
struct GlobalLossGrad {
  double loss = 0.0;
  double d_positive = 0.0;
  std::vector<double> d_negatives;
};
GlobalLossGrad global_loss_grad(const ScoreBreakdown& pos, std::span<const ScoreBreakdown> negs, double tau);

// Derivatives of local_loss w.r.t. each individual score of the positive.
struct LocalLossGrad {
  double loss = 0.0;
  std::vector<double> d_individual;
};
LocalLossGrad local_loss_grad(const ScoreBreakdown& pos, double tau);

enum class TauMode { annealed, fixed };

struct LossConfig {
  double lambda = 0.01;
  double alpha = 0.1;
  double tau_floor = 0.3;
  TauMode tau_mode = TauMode::annealed;
  double fixed_tau = 1.0;

  void validate() const;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

std::string to_string(TauMode mode);
TauMode parse_tau_mode(std::string_view text);

// tau(t) = max(floor, exp(-alpha t)), stepped once per epoch; constant in fixed mode.
class TemperatureSchedule {
 public:
  TemperatureSchedule() = default;
  explicit TemperatureSchedule(const LossConfig& cfg);
  static TemperatureSchedule annealed(double alpha, double floor = 0.3);
  static TemperatureSchedule fixed(double tau);

  double at(std::size_t epoch) const;
  std::size_t current_epoch() const { return current_epoch_; }
  void set_epoch(std::size_t epoch) { current_epoch_ = epoch; }
  double current() const { return at(current_epoch_); }

 private:
  TauMode mode_ = TauMode::annealed;
  double alpha_ = 0.1;
  double floor_ = 0.3;
  double fixed_ = 1.0;
  std::size_t current_epoch_ = 0;
};

double temperature_at(const TemperatureSchedule& schedule, std::size_t epoch);

}  // namespace mvr
