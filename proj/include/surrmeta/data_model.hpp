#pragma once

#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "surrmeta/errors.hpp"

namespace surrmeta {

enum class SurrogateScale { suvr, centiloid };
enum class Outcome { cdr_sob, adas_cog, mmse };
enum class Tracer { florbetapir, florbetaben, flutemetamol, other };

std::string to_string(SurrogateScale s);
std::string to_string(Outcome o);
std::string to_string(Tracer t);
SurrogateScale scale_from_string(const std::string& s);
Outcome outcome_from_string(const std::string& s);
Tracer tracer_from_string(const std::string& s);

/// One active-vs-placebo contrast: effects on the surrogate (y1) and on the
/// final clinical outcome (y2), both as differences in change from baseline.
struct TrialContrast {
  std::string study_id;
  std::string treatment;
  std::string contrast_id;
  double y1 = 0.0;
  double se1 = 0.0;
  SurrogateScale surrogate_scale = SurrogateScale::suvr;
  std::set<Tracer> tracers;
  double t_surrogate_weeks = 0.0;
  double y2 = 0.0;
  double se2 = 0.0;
  Outcome outcome = Outcome::cdr_sob;
  std::optional<int> adascog_variant;
  double t_final_weeks = 0.0;
  long n_final = 0;
  std::optional<double> rho_within;
  std::optional<double> aria_effect;
  std::optional<double> apoe_prop;
  bool imputed_scale = false;
};

struct Dataset {
  std::vector<TrialContrast> contrasts;
  std::string provenance;

  std::vector<std::string> study_ids() const;  // unique, first-appearance order
  std::size_t n_studies() const { return study_ids().size(); }
  std::vector<std::string> treatments() const;  // unique, sorted
};

/// All contrasts of one study plus the joint within-study covariance of the
/// stacked observation vector (y1_1, y2_1, y1_2, y2_2, ...).
struct StudyBlock {
  std::string study_id;
  std::vector<TrialContrast> contrasts;
  Eigen::MatrixXd sigma_within;
  bool psd_repaired = false;
  double min_eigenvalue_before = 0.0;

  Eigen::VectorXd observations() const;  // stacked (y1_k, y2_k)
};

/// Parses the contrast-level CSV schema. Required header columns:
/// study_id, treatment, contrast_id, y1, se1, surrogate_scale, tracers,
/// t_surrogate_weeks, y2, se2, outcome, adascog_variant, t_final_weeks,
/// n_final, rho_within, aria_effect, apoe_prop.
/// An empty cell means an absent optional. Unknown columns are ignored,
/// except the optional imputed_scale flag which round-trips conversions.
Dataset parse_dataset(std::istream& in);
Dataset parse_dataset_file(const std::string& path);
void write_dataset_csv(const Dataset& d, std::ostream& out);
void write_dataset_csv_file(const Dataset& d, const std::string& path);

struct Finding {
  enum class Severity { error, warning };
  Severity severity;
  std::string study_id;
  std::string contrast_id;
  std::string message;
};

struct ValidationReport {
  std::vector<Finding> findings;
  bool has_errors() const;
  std::size_t error_count() const;
  std::size_t warning_count() const;
};

ValidationReport validate_dataset(const Dataset& d);

struct BlockOptions {
  double default_rho = 0.0;        // surrogate-final correlation when a row reports none
  double shared_control_rho = 0.5; // same-outcome correlation between contrasts sharing a control arm
  bool repair_psd = true;          // clip negative eigenvalues to zero instead of failing
};

/// Groups contrasts into per-study blocks and fills the within-study
/// covariance. Per contrast the y1-y2 covariance is rho*se1*se2 with rho
/// resolved as rho_within when reported, default_rho otherwise. Between
/// contrasts j != k of a multi-arm study, same-outcome entries use
/// shared_control_rho and cross-outcome entries use shared_control_rho times
/// the mean of the two resolved rhos.
std::vector<StudyBlock> build_study_blocks(const Dataset& d, const BlockOptions& opts = {});

/// Keeps only contrasts measured on the given clinical outcome.
Dataset filter_outcome(const Dataset& d, Outcome outcome);

enum class TimepointPolicy { earliest_surrogate, matched };

/// When a (study, contrast) pair appears at several measurement timepoints,
/// keeps the row with the earliest (earliest_surrogate) or latest (matched)
/// surrogate timepoint. Afterwards (study_id, contrast_id) is unique.
Dataset select_timepoints(const Dataset& d, TimepointPolicy policy);

}  // namespace surrmeta
