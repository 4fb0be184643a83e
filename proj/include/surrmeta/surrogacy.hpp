#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "surrmeta/data_model.hpp"
#include "surrmeta/mcmc.hpp"

namespace surrmeta {

enum class PsiPriorKind { uniform, half_normal, gamma_precision, fixed };

/// Prior on the conditional standard deviation psi (psi2 = psi^2 is the
/// reported parameter).
struct PsiPrior {
  PsiPriorKind kind = PsiPriorKind::uniform;
  double upper = 2.0;    // uniform on psi
  double scale = 1.0;    // half-normal on psi
  double shape = 0.001;  // gamma on the precision 1/psi2
  double rate = 0.001;
  double value = 0.1;  // fixed psi (testing hook)

  static PsiPrior uniform(double upper) { return {PsiPriorKind::uniform, upper, 1, 0.001, 0.001, 0.1}; }
  static PsiPrior half_normal(double scale) { return {PsiPriorKind::half_normal, 2, scale, 0.001, 0.001, 0.1}; }
  static PsiPrior gamma_precision(double shape, double rate) {
    return {PsiPriorKind::gamma_precision, 2, 1, shape, rate, 0.1};
  }
  static PsiPrior fixed(double psi) { return {PsiPriorKind::fixed, 2, 1, 0.001, 0.001, psi}; }

  /// Log density with respect to psi2. -inf outside the support.
  double log_density_psi2(double psi2) const;
  /// Prior draw of psi2 (used by the calibration harness).
  double sample_psi2(Rng& rng) const;
  std::string describe() const;
};

struct PriorConfig {
  double lambda_sd = 100.0;      // lambda0, lambda1 (and lambda2)
  double delta1_sd = 100.0;      // vague prior on true surrogate effects
  PsiPrior psi{};                // conditional-SD prior (pooled / subgroup / common)
  double hypermean_sd = 100.0;   // b0, b1, b_psi
  double hyper_sd_scale = 1.0;   // half-normal scale for t0, t1
  double logpsi_scale = 1.0;     // half-normal scale for t_psi
  bool common_psi = false;       // single psi across treatments instead of exchangeable log-psi
};

enum class ModelKind { pooled, subgroup, full, partial };
enum class CovariateKind { none, aria, apoe };

std::string to_string(ModelKind k);
std::string to_string(CovariateKind k);

/// Posterior of one surrogacy fit; the hierarchical variants add
/// per-treatment parameters, hypermeans/hyper-SDs and mixture weights.
struct FitResult {
  ModelKind kind = ModelKind::pooled;
  std::vector<std::string> treatments;  // sorted; empty for pooled, singleton for subgroup
  std::vector<mcmc::Chain> chains;
  std::map<std::string, mcmc::PosteriorSummary> summaries;
  mcmc::DiagnosticsReport diag;
  PriorConfig priors;
  mcmc::McmcSettings settings;
  CovariateKind covariate = CovariateKind::none;
  double covariate_center = 0.0;

  struct ContrastRef {
    std::string study_id, contrast_id, treatment;
    double se2 = 0.0;
    double covariate_value = 0.0;  // centered
  };
  std::vector<ContrastRef> contrast_refs;  // delta indexing order

  bool hierarchical() const { return kind == ModelKind::full || kind == ModelKind::partial; }
  std::string lambda0_name(const std::string& treatment = "") const;
  std::string lambda1_name(const std::string& treatment = "") const;
  std::string psi2_name(const std::string& treatment = "") const;
  static std::string delta1_name(const ContrastRef& ref);
  static std::string delta2_name(const ContrastRef& ref);
  const mcmc::PosteriorSummary& summary(const std::string& name) const;
  Eigen::VectorXd draws(const std::string& name) const;
};

/// One fit request; hold_out_y2 censors the clinical-outcome observations of
/// the named studies (their surrogate observations stay in).
struct FitJob {
  ModelKind kind = ModelKind::pooled;
  std::string subgroup_treatment;
  PriorConfig priors{};
  mcmc::McmcSettings settings{};
  CovariateKind covariate = CovariateKind::none;
  std::set<std::string> hold_out_y2;
};

FitResult run_fit(const std::vector<StudyBlock>& blocks, const FitJob& job);

FitResult fit_pooled(const std::vector<StudyBlock>& blocks, const PriorConfig& priors,
                     const mcmc::McmcSettings& settings, CovariateKind covariate = CovariateKind::none);
FitResult fit_subgroup(const std::vector<StudyBlock>& blocks, const std::string& treatment,
                       const PriorConfig& priors, const mcmc::McmcSettings& settings,
                       CovariateKind covariate = CovariateKind::none);
FitResult fit_hierarchical(const std::vector<StudyBlock>& blocks, ModelKind mode,
                           const PriorConfig& priors, const mcmc::McmcSettings& settings,
                           CovariateKind covariate = CovariateKind::none);

/// Keeps only the contrasts of one treatment, taking the matching rows and
/// columns of each within-study covariance.
std::vector<StudyBlock> restrict_to_treatment(const std::vector<StudyBlock>& blocks,
                                              const std::string& treatment);

/// The three surrogacy criteria: intercept CrI contains zero, slope CrI
/// excludes zero, posterior median of psi2 under the threshold.
struct Verdict {
  bool intercept_zero = false;
  bool slope_nonzero = false;
  bool variance_small = false;
  enum class Label { supported, weak, not_supported } label = Label::not_supported;
  double psi2_threshold = 0.05;
};

std::string to_string(Verdict::Label label);

Verdict evaluate_criteria(const FitResult& fit, double psi2_threshold = 0.05,
                          const std::string& treatment = "");

struct BandPoint {
  double x = 0, mean = 0, lo = 0, hi = 0;
};

/// Pointwise posterior mean and central 95% interval of the regression mean
/// lambda0 + lambda1 * x (covariate held at its centered zero).
std::vector<BandPoint> regression_band(const FitResult& fit, const std::vector<double>& grid,
                                       const std::string& treatment = "");

struct WidthReduction {
  struct Row {
    std::string treatment;
    double slope = 0;  // (subgroup width - hierarchical width) / subgroup width
    double psi2 = 0;
  };
  std::vector<Row> rows;
  double slope_avg = 0, slope_min = 0, slope_max = 0;
  double psi2_avg = 0, psi2_min = 0, psi2_max = 0;
};

WidthReduction width_reduction(const std::map<std::string, FitResult>& subgroup,
                               const FitResult& hier);

}  // namespace surrmeta
