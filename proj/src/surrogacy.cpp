#include "surrmeta/surrogacy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include <boost/math/distributions/gamma.hpp>

#include "surrmeta/stats.hpp"
#include "surrmeta/util.hpp"

namespace surrmeta {

namespace {

constexpr double kPsi2Floor = 1e-16;  // support truncation keeping 1/psi2 finite
constexpr double kSdFloor = 1e-6;     // same for hyper-SDs

double log_normal_pdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * std::log(2.0 * M_PI) - std::log(sd) - 0.5 * z * z;
}

double log_half_normal_pdf(double x, double scale) {
  if (x < 0.0) return -std::numeric_limits<double>::infinity();
  return 0.5 * std::log(2.0 / M_PI) - std::log(scale) - 0.5 * x * x / (scale * scale);
}

}  // namespace

double PsiPrior::log_density_psi2(double psi2) const {
  if (!(psi2 >= kPsi2Floor)) return -std::numeric_limits<double>::infinity();
  switch (kind) {
    case PsiPriorKind::uniform: {
      const double psi = std::sqrt(psi2);
      if (psi >= upper) return -std::numeric_limits<double>::infinity();
      return -std::log(2.0 * upper) - 0.5 * std::log(psi2);
    }
    case PsiPriorKind::half_normal:
      return 0.5 * std::log(2.0 / M_PI) - std::log(scale) - 0.5 * psi2 / (scale * scale) -
             std::log(2.0) - 0.5 * std::log(psi2);
    case PsiPriorKind::gamma_precision:
      return shape * std::log(rate) - std::lgamma(shape) - (shape + 1.0) * std::log(psi2) -
             rate / psi2;
    case PsiPriorKind::fixed:
      return 0.0;  // point mass; the sampler never moves this coordinate
  }
  return -std::numeric_limits<double>::infinity();
}

double PsiPrior::sample_psi2(Rng& rng) const {
  switch (kind) {
    case PsiPriorKind::uniform: {
      const double psi = upper * rng.uniform();
      return psi * psi;
    }
    case PsiPriorKind::half_normal: {
      const double psi = std::abs(rng.normal(0.0, scale));
      return psi * psi;
    }
    case PsiPriorKind::gamma_precision: {
      const boost::math::gamma_distribution<double> dist(shape, 1.0 / rate);
      const double u = std::clamp(rng.uniform(), 1e-12, 1.0 - 1e-12);
      const double precision = boost::math::quantile(dist, u);
      return 1.0 / std::max(precision, 1e-300);
    }
    case PsiPriorKind::fixed:
      return value * value;
  }
  return 0.0;
}

std::string PsiPrior::describe() const {
  switch (kind) {
    case PsiPriorKind::uniform: return "uniform(0," + util::format_double(upper) + ") on psi";
    case PsiPriorKind::half_normal: return "half-normal(" + util::format_double(scale) + ") on psi";
    case PsiPriorKind::gamma_precision:
      return "gamma(" + util::format_double(shape) + "," + util::format_double(rate) +
             ") on 1/psi2";
    case PsiPriorKind::fixed: return "fixed psi=" + util::format_double(value);
  }
  return "?";
}

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::pooled: return "pooled";
    case ModelKind::subgroup: return "subgroup";
    case ModelKind::full: return "full";
    case ModelKind::partial: return "partial";
  }
  return "?";
}

std::string to_string(CovariateKind k) {
  switch (k) {
    case CovariateKind::none: return "none";
    case CovariateKind::aria: return "aria";
    case CovariateKind::apoe: return "apoe";
  }
  return "?";
}

std::string to_string(Verdict::Label label) {
  switch (label) {
    case Verdict::Label::supported: return "supported";
    case Verdict::Label::weak: return "weak";
    case Verdict::Label::not_supported: return "not-supported";
  }
  return "?";
}

std::string FitResult::lambda0_name(const std::string& treatment) const {
  return hierarchical() ? "lambda0[" + treatment + "]" : "lambda0";
}

std::string FitResult::lambda1_name(const std::string& treatment) const {
  return hierarchical() ? "lambda1[" + treatment + "]" : "lambda1";
}

std::string FitResult::psi2_name(const std::string& treatment) const {
  return hierarchical() && !priors.common_psi ? "psi2[" + treatment + "]" : "psi2";
}

std::string FitResult::delta1_name(const ContrastRef& ref) {
  return "delta1[" + ref.study_id + ":" + ref.contrast_id + "]";
}

std::string FitResult::delta2_name(const ContrastRef& ref) {
  return "delta2[" + ref.study_id + ":" + ref.contrast_id + "]";
}

const mcmc::PosteriorSummary& FitResult::summary(const std::string& name) const {
  const auto it = summaries.find(name);
  if (it == summaries.end()) throw UnknownParameter(name);
  return it->second;
}

Eigen::VectorXd FitResult::draws(const std::string& name) const {
  return mcmc::pooled_draws(chains, name);
}

namespace {

struct ContrastData {
  std::size_t study = 0;
  std::string study_id, contrast_id, treatment;
  int treat_idx = 0;
  double y1 = 0, se1 = 0, y2 = 0, se2 = 0;
  double x = 0;  // centered covariate
};

struct StudyData {
  Eigen::MatrixXd prec;
  Eigen::VectorXd prec_y;
  Eigen::VectorXd y_obs;
  double logdet = 0;
  std::vector<int> obs_coords;          // local delta coordinates with data
  std::vector<std::size_t> contrasts;   // global contrast index per position k
};

struct Layout {
  int n_treat = 1;
  bool hier = false, partial = false, common_psi = false, has_cov = false, fixed_psi = false;
  std::vector<int> lambda0, lambda1, psi2;
  int lambda2 = -1;
  int b0 = -1, b1 = -1, t0 = -1, t1 = -1, b_psi = -1, t_psi = -1;
  std::vector<int> w, z, wpost;
  int delta1_base = -1, delta2_base = -1;
  int total = 0;

  int psi2_for(int j) const { return (hier && !common_psi) ? psi2[j] : psi2[0]; }
};

struct ModelData {
  std::vector<ContrastData> contrasts;
  std::vector<StudyData> studies;
  std::vector<std::string> treatments;
  PriorConfig priors;
  Layout L;
  std::vector<std::string> names;
  double covariate_center = 0.0;

  double cond_mean(const Eigen::VectorXd& s, std::size_t g) const {
    const auto& c = contrasts[g];
    double m = s[L.lambda0[c.treat_idx]] + s[L.lambda1[c.treat_idx]] * s[L.delta1_base + g];
    if (L.lambda2 >= 0) m += s[L.lambda2] * c.x;
    return m;
  }
};

int push_name(std::vector<std::string>& names, const std::string& n) {
  names.push_back(n);
  return static_cast<int>(names.size()) - 1;
}

std::shared_ptr<ModelData> build_model_data(const std::vector<StudyBlock>& blocks, const FitJob& job) {
  auto md = std::make_shared<ModelData>();
  md->priors = job.priors;

  // Flatten contrasts in block order and resolve treatments.
  std::size_t total = 0;
  for (const auto& b : blocks) total += b.contrasts.size();
  if (total < 3)
    throw InsufficientData("need at least 3 contrasts, got " + std::to_string(total));

  std::set<Outcome> outcomes;
  std::set<SurrogateScale> scales;
  for (const auto& b : blocks)
    for (const auto& c : b.contrasts) {
      outcomes.insert(c.outcome);
      scales.insert(c.surrogate_scale);
    }
  if (outcomes.size() > 1) throw MixedOutcome("contrasts mix clinical outcomes; filter first");
  if (scales.size() > 1) throw MixedScale("contrasts mix surrogate scales; harmonize first");

  const bool hier = job.kind == ModelKind::full || job.kind == ModelKind::partial;
  if (hier) {
    std::set<std::string> ts;
    for (const auto& b : blocks)
      for (const auto& c : b.contrasts) ts.insert(c.treatment);
    md->treatments.assign(ts.begin(), ts.end());
    if (md->treatments.size() < 2)
      throw SingleTreatment("hierarchical models need >= 2 treatments");
  }

  std::map<std::string, int> treat_index;
  for (std::size_t j = 0; j < md->treatments.size(); ++j)
    treat_index[md->treatments[j]] = static_cast<int>(j);

  std::vector<std::string> missing_cov;
  std::vector<double> cov_values;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    for (const auto& c : blocks[bi].contrasts) {
      ContrastData cd;
      cd.study = bi;
      cd.study_id = c.study_id;
      cd.contrast_id = c.contrast_id;
      cd.treatment = c.treatment;
      cd.treat_idx = hier ? treat_index.at(c.treatment) : 0;
      cd.y1 = c.y1;
      cd.se1 = c.se1;
      cd.y2 = c.y2;
      cd.se2 = c.se2;
      if (job.covariate != CovariateKind::none) {
        const auto& v = job.covariate == CovariateKind::aria ? c.aria_effect : c.apoe_prop;
        if (!v)
          missing_cov.push_back(c.study_id + ":" + c.contrast_id);
        else
          cov_values.push_back(*v);
        cd.x = v.value_or(0.0);
      }
      md->contrasts.push_back(std::move(cd));
    }
  }
  if (!missing_cov.empty()) {
    std::string msg = "covariate '" + to_string(job.covariate) + "' missing for:";
    for (const auto& m : missing_cov) msg += " " + m;
    throw DataError(msg);
  }
  if (job.covariate != CovariateKind::none) {
    md->covariate_center =
        std::accumulate(cov_values.begin(), cov_values.end(), 0.0) / cov_values.size();
    for (auto& c : md->contrasts) c.x -= md->covariate_center;
  }

  // Per-study observation precision, censoring the held-out y2 coordinates.
  std::size_t g = 0;
  for (const auto& b : blocks) {
    StudyData sd;
    const bool hold_out = job.hold_out_y2.count(b.study_id) > 0;
    const auto K = static_cast<int>(b.contrasts.size());
    for (int k = 0; k < K; ++k) {
      sd.contrasts.push_back(g++);
      sd.obs_coords.push_back(2 * k);
      if (!hold_out) sd.obs_coords.push_back(2 * k + 1);
    }
    const auto n = static_cast<Eigen::Index>(sd.obs_coords.size());
    Eigen::MatrixXd sigma(n, n);
    sd.y_obs.resize(n);
    const Eigen::VectorXd y_full = b.observations();
    for (Eigen::Index i = 0; i < n; ++i) {
      sd.y_obs[i] = y_full[sd.obs_coords[static_cast<std::size_t>(i)]];
      for (Eigen::Index j = 0; j < n; ++j)
        sigma(i, j) = b.sigma_within(sd.obs_coords[static_cast<std::size_t>(i)],
                                     sd.obs_coords[static_cast<std::size_t>(j)]);
    }
    // A PSD-repaired block can be singular; add a relative ridge until the
    // factorization succeeds.
    double ridge = 0.0;
    const double scale_hint = sigma.diagonal().maxCoeff();
    Eigen::LLT<Eigen::MatrixXd> llt;
    for (int attempt = 0; attempt < 8; ++attempt) {
      llt.compute(sigma + ridge * Eigen::MatrixXd::Identity(n, n));
      if (llt.info() == Eigen::Success) break;
      ridge = ridge == 0.0 ? 1e-12 * scale_hint : ridge * 100.0;
    }
    if (llt.info() != Eigen::Success)
      throw DataError("within-study covariance of study '" + b.study_id + "' is not invertible");
    sd.prec = llt.solve(Eigen::MatrixXd::Identity(n, n));
    sd.prec = 0.5 * (sd.prec + sd.prec.transpose().eval());
    sd.prec_y = sd.prec * sd.y_obs;
    sd.logdet = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    md->studies.push_back(std::move(sd));
  }

  // Parameter layout.
  Layout& L = md->L;
  L.hier = hier;
  L.partial = job.kind == ModelKind::partial;
  L.common_psi = md->priors.common_psi;
  L.has_cov = job.covariate != CovariateKind::none;
  L.fixed_psi = md->priors.psi.kind == PsiPriorKind::fixed;
  L.n_treat = hier ? static_cast<int>(md->treatments.size()) : 1;

  auto& names = md->names;
  if (!hier) {
    L.lambda0.push_back(push_name(names, "lambda0"));
    L.lambda1.push_back(push_name(names, "lambda1"));
    if (L.has_cov) L.lambda2 = push_name(names, "lambda2");
    L.psi2.push_back(push_name(names, "psi2"));
  } else {
    for (const auto& t : md->treatments) L.lambda0.push_back(push_name(names, "lambda0[" + t + "]"));
    for (const auto& t : md->treatments) L.lambda1.push_back(push_name(names, "lambda1[" + t + "]"));
    if (L.common_psi) {
      L.psi2.push_back(push_name(names, "psi2"));
    } else {
      for (const auto& t : md->treatments) L.psi2.push_back(push_name(names, "psi2[" + t + "]"));
    }
    L.b0 = push_name(names, "b0");
    L.b1 = push_name(names, "b1");
    L.t0 = push_name(names, "t0");
    L.t1 = push_name(names, "t1");
    if (!L.common_psi) {
      L.b_psi = push_name(names, "b_psi");
      L.t_psi = push_name(names, "t_psi");
    }
    if (L.has_cov) L.lambda2 = push_name(names, "lambda2");
    if (L.partial) {
      for (const auto& t : md->treatments) L.w.push_back(push_name(names, "w[" + t + "]"));
      for (const auto& t : md->treatments) L.z.push_back(push_name(names, "z[" + t + "]"));
      for (const auto& t : md->treatments) L.wpost.push_back(push_name(names, "w_post[" + t + "]"));
    }
  }
  L.delta1_base = static_cast<int>(names.size());
  for (const auto& c : md->contrasts)
    push_name(names, "delta1[" + c.study_id + ":" + c.contrast_id + "]");
  L.delta2_base = static_cast<int>(names.size());
  for (const auto& c : md->contrasts)
    push_name(names, "delta2[" + c.study_id + ":" + c.contrast_id + "]");
  L.total = static_cast<int>(names.size());
  return md;
}

void update_study_effects(const ModelData& md, Eigen::VectorXd& s, Rng& rng) {
  const Layout& L = md.L;
  const double d1_prec = 1.0 / (md.priors.delta1_sd * md.priors.delta1_sd);
  for (const auto& st : md.studies) {
    const auto K = static_cast<int>(st.contrasts.size());
    const int D = 2 * K;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(D, D);
    Eigen::VectorXd eta = Eigen::VectorXd::Zero(D);
    for (int k = 0; k < K; ++k) {
      const auto& c = md.contrasts[st.contrasts[static_cast<std::size_t>(k)]];
      const int j = c.treat_idx;
      const double lam1 = s[L.lambda1[j]];
      const double inv_psi2 = 1.0 / s[L.psi2_for(j)];
      double cmean = s[L.lambda0[j]];
      if (L.lambda2 >= 0) cmean += s[L.lambda2] * c.x;
      A(2 * k, 2 * k) += d1_prec + lam1 * lam1 * inv_psi2;
      A(2 * k, 2 * k + 1) += -lam1 * inv_psi2;
      A(2 * k + 1, 2 * k) += -lam1 * inv_psi2;
      A(2 * k + 1, 2 * k + 1) += inv_psi2;
      eta[2 * k] += -lam1 * inv_psi2 * cmean;
      eta[2 * k + 1] += inv_psi2 * cmean;
    }
    const auto n = static_cast<int>(st.obs_coords.size());
    for (int i = 0; i < n; ++i) {
      eta[st.obs_coords[static_cast<std::size_t>(i)]] += st.prec_y[i];
      for (int j2 = 0; j2 < n; ++j2)
        A(st.obs_coords[static_cast<std::size_t>(i)], st.obs_coords[static_cast<std::size_t>(j2)]) +=
            st.prec(i, j2);
    }
    const Eigen::VectorXd delta = mcmc::sample_mvn_precision(A, eta, rng);
    for (int k = 0; k < K; ++k) {
      const auto g = st.contrasts[static_cast<std::size_t>(k)];
      s[L.delta1_base + static_cast<int>(g)] = delta[2 * k];
      s[L.delta2_base + static_cast<int>(g)] = delta[2 * k + 1];
    }
  }
}

void update_regression(const ModelData& md, Eigen::VectorXd& s, Rng& rng) {
  const Layout& L = md.L;
  const double vague_prec = 1.0 / (md.priors.lambda_sd * md.priors.lambda_sd);

  if (!L.hier) {
    const int dim = L.has_cov ? 3 : 2;
    Eigen::MatrixXd prec = Eigen::MatrixXd::Identity(dim, dim) * vague_prec;
    Eigen::VectorXd lin = Eigen::VectorXd::Zero(dim);
    const double inv_psi2 = 1.0 / s[L.psi2[0]];
    Eigen::VectorXd u(dim);
    for (std::size_t g = 0; g < md.contrasts.size(); ++g) {
      u[0] = 1.0;
      u[1] = s[L.delta1_base + static_cast<int>(g)];
      if (dim == 3) u[2] = md.contrasts[g].x;
      const double z = s[L.delta2_base + static_cast<int>(g)];
      prec.noalias() += inv_psi2 * u * u.transpose();
      lin.noalias() += inv_psi2 * z * u;
    }
    const Eigen::VectorXd theta = mcmc::sample_mvn_precision(prec, lin, rng);
    s[L.lambda0[0]] = theta[0];
    s[L.lambda1[0]] = theta[1];
    if (dim == 3) s[L.lambda2] = theta[2];
    return;
  }

  for (int j = 0; j < L.n_treat; ++j) {
    const bool in_component = !L.partial || s[L.z[static_cast<std::size_t>(j)]] > 0.5;
    double m0 = 0, m1 = 0, p0 = vague_prec, p1 = vague_prec;
    if (in_component) {
      const double t0 = s[L.t0], t1 = s[L.t1];
      m0 = s[L.b0];
      m1 = s[L.b1];
      p0 = 1.0 / (t0 * t0);
      p1 = 1.0 / (t1 * t1);
    }
    Eigen::Matrix2d prec;
    prec << p0, 0, 0, p1;
    Eigen::Vector2d lin(p0 * m0, p1 * m1);
    const double inv_psi2 = 1.0 / s[L.psi2_for(j)];
    for (std::size_t g = 0; g < md.contrasts.size(); ++g) {
      if (md.contrasts[g].treat_idx != j) continue;
      Eigen::Vector2d u(1.0, s[L.delta1_base + static_cast<int>(g)]);
      double z = s[L.delta2_base + static_cast<int>(g)];
      if (L.lambda2 >= 0) z -= s[L.lambda2] * md.contrasts[g].x;
      prec.noalias() += inv_psi2 * u * u.transpose();
      lin.noalias() += inv_psi2 * z * u;
    }
    const Eigen::VectorXd theta = mcmc::sample_mvn_precision(prec, lin, rng);
    s[L.lambda0[static_cast<std::size_t>(j)]] = theta[0];
    s[L.lambda1[static_cast<std::size_t>(j)]] = theta[1];
  }

  if (L.lambda2 >= 0) {
    double prec = vague_prec, lin = 0.0;
    for (std::size_t g = 0; g < md.contrasts.size(); ++g) {
      const auto& c = md.contrasts[g];
      const double inv_psi2 = 1.0 / s[L.psi2_for(c.treat_idx)];
      const double r = s[L.delta2_base + static_cast<int>(g)] - s[L.lambda0[c.treat_idx]] -
                       s[L.lambda1[c.treat_idx]] * s[L.delta1_base + static_cast<int>(g)];
      prec += inv_psi2 * c.x * c.x;
      lin += inv_psi2 * c.x * r;
    }
    s[L.lambda2] = lin / prec + rng.normal() / std::sqrt(prec);
  }
}

void update_hypermeans(const ModelData& md, Eigen::VectorXd& s, Rng& rng) {
  const Layout& L = md.L;
  const double hm_prec = 1.0 / (md.priors.hypermean_sd * md.priors.hypermean_sd);

  auto draw_mean = [&](int value_idx_base, const std::vector<int>& members, int t_idx) {
    const double t = s[t_idx];
    const double g_prec = 1.0 / (t * t);
    double prec = hm_prec, lin = 0.0;
    for (const int idx : members) {
      prec += g_prec;
      lin += g_prec * s[idx];
    }
    (void)value_idx_base;
    return lin / prec + rng.normal() / std::sqrt(prec);
  };

  std::vector<int> members0, members1;
  for (int j = 0; j < L.n_treat; ++j) {
    if (L.partial && s[L.z[static_cast<std::size_t>(j)]] < 0.5) continue;
    members0.push_back(L.lambda0[static_cast<std::size_t>(j)]);
    members1.push_back(L.lambda1[static_cast<std::size_t>(j)]);
  }
  s[L.b0] = draw_mean(L.b0, members0, L.t0);
  s[L.b1] = draw_mean(L.b1, members1, L.t1);

  if (!L.common_psi) {
    const double t = s[L.t_psi];
    const double g_prec = 1.0 / (t * t);
    double prec = hm_prec, lin = 0.0;
    for (int j = 0; j < L.n_treat; ++j) {
      const double logpsi = 0.5 * std::log(s[L.psi2[static_cast<std::size_t>(j)]]);
      prec += g_prec;
      lin += g_prec * logpsi;
    }
    s[L.b_psi] = lin / prec + rng.normal() / std::sqrt(prec);
  }
}

void update_mixture(const ModelData& md, Eigen::VectorXd& s, Rng& rng) {
  const Layout& L = md.L;
  const double lam_sd = md.priors.lambda_sd;
  for (int j = 0; j < L.n_treat; ++j) {
    const auto uj = static_cast<std::size_t>(j);
    const double w = std::clamp(s[L.w[uj]], 1e-12, 1.0 - 1e-12);
    const double l0 = s[L.lambda0[uj]];
    const double l1 = s[L.lambda1[uj]];
    const double lp1 = std::log(w) + log_normal_pdf(l0, s[L.b0], s[L.t0]) +
                       log_normal_pdf(l1, s[L.b1], s[L.t1]);
    const double lp0 = std::log1p(-w) + log_normal_pdf(l0, 0.0, lam_sd) +
                       log_normal_pdf(l1, 0.0, lam_sd);
    const double m = std::max(lp1, lp0);
    const double p1 = std::exp(lp1 - m);
    const double p0 = std::exp(lp0 - m);
    const double wpost = p1 / (p1 + p0);
    const bool in = rng.uniform() < wpost;
    s[L.z[uj]] = in ? 1.0 : 0.0;
    s[L.wpost[uj]] = wpost;
    // w | z ~ Beta(1+z, 2-z), sampled by inverse CDF
    const double u = rng.uniform_pos();
    s[L.w[uj]] = in ? std::sqrt(u) : 1.0 - std::sqrt(u);
  }
}

mcmc::Model assemble_model(std::shared_ptr<const ModelData> md) {
  mcmc::Model model;
  const Layout& L = md->L;
  model.names = md->names;

  model.gibbs.push_back({"study_effects", [md](Eigen::VectorXd& s, Rng& rng) {
                           update_study_effects(*md, s, rng);
                         }});
  model.gibbs.push_back({"regression", [md](Eigen::VectorXd& s, Rng& rng) {
                           update_regression(*md, s, rng);
                         }});
  if (L.hier) {
    model.gibbs.push_back({"hypermeans", [md](Eigen::VectorXd& s, Rng& rng) {
                             update_hypermeans(*md, s, rng);
                           }});
    if (L.partial)
      model.gibbs.push_back({"mixture", [md](Eigen::VectorXd& s, Rng& rng) {
                               update_mixture(*md, s, rng);
                             }});
  }

  // Conditional-variance updates: random-walk Metropolis on the log scale.
  if (!L.fixed_psi) {
    if (!L.hier || L.common_psi) {
      const int idx = L.psi2[0];
      model.metropolis.push_back(
          {"psi2", idx, mcmc::ProposalScale::log, [md, idx](const Eigen::VectorXd& s) {
             double lp = md->priors.psi.log_density_psi2(s[idx]);
             if (!std::isfinite(lp)) return lp;
             const double sd = std::sqrt(s[idx]);
             for (std::size_t g = 0; g < md->contrasts.size(); ++g)
               lp += log_normal_pdf(s[md->L.delta2_base + static_cast<int>(g)],
                                    md->cond_mean(s, g), sd);
             return lp;
           }});
    } else {
      for (int j = 0; j < L.n_treat; ++j) {
        const int idx = L.psi2[static_cast<std::size_t>(j)];
        model.metropolis.push_back(
            {"psi2[" + md->treatments[static_cast<std::size_t>(j)] + "]", idx,
             mcmc::ProposalScale::log, [md, idx, j](const Eigen::VectorXd& s) {
               const double v = s[idx];
               if (!(v >= kPsi2Floor)) return -std::numeric_limits<double>::infinity();
               // log psi ~ N(b_psi, t_psi^2), expressed as a density over psi2
               double lp = log_normal_pdf(0.5 * std::log(v), s[md->L.b_psi], s[md->L.t_psi]) -
                           std::log(2.0) - std::log(v);
               const double sd = std::sqrt(v);
               for (std::size_t g = 0; g < md->contrasts.size(); ++g) {
                 if (md->contrasts[g].treat_idx != j) continue;
                 lp += log_normal_pdf(s[md->L.delta2_base + static_cast<int>(g)],
                                      md->cond_mean(s, g), sd);
               }
               return lp;
             }});
      }
    }
  }

  if (L.hier) {
    auto add_sd_step = [&](const std::string& label, int t_idx, const std::vector<int>& value_idx,
                           int mean_idx, double scale, bool gate_on_z) {
      model.metropolis.push_back(
          {label, t_idx, mcmc::ProposalScale::log,
           [md, t_idx, value_idx, mean_idx, scale, gate_on_z](const Eigen::VectorXd& s) {
             const double t = s[t_idx];
             if (!(t >= kSdFloor)) return -std::numeric_limits<double>::infinity();
             double lp = log_half_normal_pdf(t, scale);
             for (std::size_t j = 0; j < value_idx.size(); ++j) {
               if (gate_on_z && s[md->L.z[j]] < 0.5) continue;
               lp += log_normal_pdf(s[value_idx[j]], s[mean_idx], t);
             }
             return lp;
           }});
    };
    add_sd_step("t0", L.t0, L.lambda0, L.b0, md->priors.hyper_sd_scale, L.partial);
    add_sd_step("t1", L.t1, L.lambda1, L.b1, md->priors.hyper_sd_scale, L.partial);
    if (!L.common_psi) {
      model.metropolis.push_back(
          {"t_psi", L.t_psi, mcmc::ProposalScale::log, [md](const Eigen::VectorXd& s) {
             const double t = s[md->L.t_psi];
             if (!(t >= kSdFloor)) return -std::numeric_limits<double>::infinity();
             double lp = log_half_normal_pdf(t, md->priors.logpsi_scale);
             for (int j = 0; j < md->L.n_treat; ++j)
               lp += log_normal_pdf(0.5 * std::log(s[md->L.psi2[static_cast<std::size_t>(j)]]),
                                    s[md->L.b_psi], t);
             return lp;
           }});
    }
  }

  model.log_density = [md](const Eigen::VectorXd& s) {
    const Layout& L2 = md->L;
    double lp = 0.0;
    for (const auto& st : md->studies) {
      const auto n = static_cast<Eigen::Index>(st.obs_coords.size());
      Eigen::VectorXd r(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int coord = st.obs_coords[static_cast<std::size_t>(i)];
        const auto k = static_cast<std::size_t>(coord / 2);
        const auto g = static_cast<int>(st.contrasts[k]);
        const double delta =
            coord % 2 == 0 ? s[L2.delta1_base + g] : s[L2.delta2_base + g];
        r[i] = st.y_obs[i] - delta;
      }
      lp += -0.5 * r.dot(st.prec * r) - 0.5 * st.logdet -
            0.5 * static_cast<double>(n) * std::log(2.0 * M_PI);
    }
    for (std::size_t g = 0; g < md->contrasts.size(); ++g) {
      const auto& c = md->contrasts[g];
      const double psi2 = s[L2.psi2_for(c.treat_idx)];
      if (!(psi2 >= kPsi2Floor)) return -std::numeric_limits<double>::infinity();
      lp += log_normal_pdf(s[L2.delta1_base + static_cast<int>(g)], 0.0, md->priors.delta1_sd);
      lp += log_normal_pdf(s[L2.delta2_base + static_cast<int>(g)], md->cond_mean(s, g),
                           std::sqrt(psi2));
    }
    if (!L2.hier) {
      lp += log_normal_pdf(s[L2.lambda0[0]], 0.0, md->priors.lambda_sd);
      lp += log_normal_pdf(s[L2.lambda1[0]], 0.0, md->priors.lambda_sd);
      if (!L2.fixed_psi) lp += md->priors.psi.log_density_psi2(s[L2.psi2[0]]);
    } else {
      for (int j = 0; j < L2.n_treat; ++j) {
        const auto uj = static_cast<std::size_t>(j);
        const bool in = !L2.partial || s[L2.z[uj]] > 0.5;
        if (in) {
          lp += log_normal_pdf(s[L2.lambda0[uj]], s[L2.b0], s[L2.t0]);
          lp += log_normal_pdf(s[L2.lambda1[uj]], s[L2.b1], s[L2.t1]);
        } else {
          lp += log_normal_pdf(s[L2.lambda0[uj]], 0.0, md->priors.lambda_sd);
          lp += log_normal_pdf(s[L2.lambda1[uj]], 0.0, md->priors.lambda_sd);
        }
        if (L2.partial) {
          const double w = s[L2.w[uj]];
          if (!(w > 0.0 && w < 1.0)) return -std::numeric_limits<double>::infinity();
          lp += s[L2.z[uj]] > 0.5 ? std::log(w) : std::log1p(-w);
        }
        if (!L2.common_psi) {
          const double v = s[L2.psi2[uj]];
          if (!(v >= kPsi2Floor)) return -std::numeric_limits<double>::infinity();
          lp += log_normal_pdf(0.5 * std::log(v), s[L2.b_psi], s[L2.t_psi]) - std::log(2.0) -
                std::log(v);
        }
      }
      lp += log_normal_pdf(s[L2.b0], 0.0, md->priors.hypermean_sd);
      lp += log_normal_pdf(s[L2.b1], 0.0, md->priors.hypermean_sd);
      if (s[L2.t0] < kSdFloor || s[L2.t1] < kSdFloor)
        return -std::numeric_limits<double>::infinity();
      lp += log_half_normal_pdf(s[L2.t0], md->priors.hyper_sd_scale);
      lp += log_half_normal_pdf(s[L2.t1], md->priors.hyper_sd_scale);
      if (!L2.common_psi) {
        lp += log_normal_pdf(s[L2.b_psi], 0.0, md->priors.hypermean_sd);
        if (s[L2.t_psi] < kSdFloor) return -std::numeric_limits<double>::infinity();
        lp += log_half_normal_pdf(s[L2.t_psi], md->priors.logpsi_scale);
      } else if (!L2.fixed_psi) {
        lp += md->priors.psi.log_density_psi2(s[L2.psi2[0]]);
      }
      if (L2.lambda2 >= 0) lp += log_normal_pdf(s[L2.lambda2], 0.0, md->priors.lambda_sd);
    }
    return lp;
  };

  for (const int idx : L.psi2) model.nonnegative.push_back(idx);
  if (L.t0 >= 0) {
    model.nonnegative.push_back(L.t0);
    model.nonnegative.push_back(L.t1);
  }
  if (L.t_psi >= 0) model.nonnegative.push_back(L.t_psi);
  return model;
}

Eigen::VectorXd initial_state(const ModelData& md) {
  const Layout& L = md.L;
  Eigen::VectorXd s = Eigen::VectorXd::Zero(L.total);

  // Weighted least squares of y2 on (1, y1[, x]) seeds the regression.
  const int dim = L.has_cov ? 3 : 2;
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Identity(dim, dim) * 1e-8;
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(dim);
  for (const auto& c : md.contrasts) {
    Eigen::VectorXd u(dim);
    u[0] = 1.0;
    u[1] = c.y1;
    if (dim == 3) u[2] = c.x;
    const double w = 1.0 / (c.se2 * c.se2);
    xtx.noalias() += w * u * u.transpose();
    xty.noalias() += w * c.y2 * u;
  }
  const Eigen::VectorXd theta = xtx.ldlt().solve(xty);
  double ss = 0.0;
  for (const auto& c : md.contrasts) {
    double fitted = theta[0] + theta[1] * c.y1;
    if (dim == 3) fitted += theta[2] * c.x;
    ss += (c.y2 - fitted) * (c.y2 - fitted);
  }
  double psi2_init = std::max(ss / static_cast<double>(md.contrasts.size()), 1e-6);
  if (md.priors.psi.kind == PsiPriorKind::uniform) {
    const double cap = 0.25 * md.priors.psi.upper * md.priors.psi.upper;
    psi2_init = std::min(psi2_init, cap);
  }
  if (md.priors.psi.kind == PsiPriorKind::fixed)
    psi2_init = md.priors.psi.value * md.priors.psi.value;

  for (int j = 0; j < L.n_treat; ++j) {
    s[L.lambda0[static_cast<std::size_t>(j)]] = theta[0];
    s[L.lambda1[static_cast<std::size_t>(j)]] = theta[1];
  }
  if (L.lambda2 >= 0) s[L.lambda2] = dim == 3 ? theta[2] : 0.0;
  for (const int idx : L.psi2) s[idx] = psi2_init;
  if (L.hier) {
    s[L.b0] = theta[0];
    s[L.b1] = theta[1];
    s[L.t0] = std::max(0.5 * md.priors.hyper_sd_scale, 1e-3);
    s[L.t1] = std::max(0.5 * md.priors.hyper_sd_scale, 1e-3);
    if (!L.common_psi) {
      s[L.b_psi] = 0.5 * std::log(psi2_init);
      s[L.t_psi] = std::max(0.5 * md.priors.logpsi_scale, 1e-3);
    }
    if (L.partial) {
      for (int j = 0; j < L.n_treat; ++j) {
        s[L.w[static_cast<std::size_t>(j)]] = 0.5;
        s[L.z[static_cast<std::size_t>(j)]] = 1.0;
        s[L.wpost[static_cast<std::size_t>(j)]] = 0.5;
      }
    }
  }
  for (std::size_t g = 0; g < md.contrasts.size(); ++g) {
    s[L.delta1_base + static_cast<int>(g)] = md.contrasts[g].y1;
    s[L.delta2_base + static_cast<int>(g)] = md.contrasts[g].y2;
  }
  return s;
}

}  // namespace

FitResult run_fit(const std::vector<StudyBlock>& blocks, const FitJob& job) {
  const std::vector<StudyBlock>* working = &blocks;
  std::vector<StudyBlock> restricted;
  if (job.kind == ModelKind::subgroup) {
    restricted = restrict_to_treatment(blocks, job.subgroup_treatment);
    working = &restricted;
  }

  auto md = build_model_data(*working, job);
  const mcmc::Model model = assemble_model(md);
  const Eigen::VectorXd init = initial_state(*md);

  FitResult fit;
  fit.kind = job.kind;
  fit.priors = job.priors;
  fit.settings = job.settings;
  fit.covariate = job.covariate;
  if (job.kind == ModelKind::subgroup)
    fit.treatments = {job.subgroup_treatment};
  else
    fit.treatments = md->treatments;
  fit.covariate_center = md->covariate_center;
  for (const auto& c : md->contrasts)
    fit.contrast_refs.push_back({c.study_id, c.contrast_id, c.treatment, c.se2, c.x});

  fit.chains = mcmc::run_chains(model, {init}, job.settings);
  for (const auto& name : model.names)
    fit.summaries.emplace(name, mcmc::summarize(fit.chains, name));
  fit.diag = mcmc::diagnostics(fit.chains);
  return fit;
}

FitResult fit_pooled(const std::vector<StudyBlock>& blocks, const PriorConfig& priors,
                     const mcmc::McmcSettings& settings, CovariateKind covariate) {
  FitJob job;
  job.kind = ModelKind::pooled;
  job.priors = priors;
  job.settings = settings;
  job.covariate = covariate;
  return run_fit(blocks, job);
}

FitResult fit_subgroup(const std::vector<StudyBlock>& blocks, const std::string& treatment,
                       const PriorConfig& priors, const mcmc::McmcSettings& settings,
                       CovariateKind covariate) {
  FitJob job;
  job.kind = ModelKind::subgroup;
  job.subgroup_treatment = treatment;
  job.priors = priors;
  job.settings = settings;
  job.covariate = covariate;
  return run_fit(blocks, job);
}

FitResult fit_hierarchical(const std::vector<StudyBlock>& blocks, ModelKind mode,
                           const PriorConfig& priors, const mcmc::McmcSettings& settings,
                           CovariateKind covariate) {
  if (mode != ModelKind::full && mode != ModelKind::partial)
    throw DataError("hierarchical mode must be full or partial");
  FitJob job;
  job.kind = mode;
  job.priors = priors;
  job.settings = settings;
  job.covariate = covariate;
  return run_fit(blocks, job);
}

std::vector<StudyBlock> restrict_to_treatment(const std::vector<StudyBlock>& blocks,
                                              const std::string& treatment) {
  bool seen = false;
  std::vector<StudyBlock> out;
  for (const auto& b : blocks) {
    std::vector<std::size_t> keep;
    for (std::size_t k = 0; k < b.contrasts.size(); ++k)
      if (b.contrasts[k].treatment == treatment) keep.push_back(k);
    if (keep.empty()) continue;
    seen = true;
    StudyBlock sub;
    sub.study_id = b.study_id;
    sub.psd_repaired = b.psd_repaired;
    sub.min_eigenvalue_before = b.min_eigenvalue_before;
    const auto D = static_cast<Eigen::Index>(2 * keep.size());
    sub.sigma_within.resize(D, D);
    for (std::size_t i = 0; i < keep.size(); ++i) {
      sub.contrasts.push_back(b.contrasts[keep[i]]);
      for (std::size_t j = 0; j < keep.size(); ++j)
        sub.sigma_within.block<2, 2>(2 * static_cast<Eigen::Index>(i), 2 * static_cast<Eigen::Index>(j)) =
            b.sigma_within.block<2, 2>(2 * static_cast<Eigen::Index>(keep[i]),
                                       2 * static_cast<Eigen::Index>(keep[j]));
    }
    out.push_back(std::move(sub));
  }
  if (!seen) throw UnknownTreatment("treatment '" + treatment + "' not present in the dataset");
  return out;
}

Verdict evaluate_criteria(const FitResult& fit, double psi2_threshold, const std::string& treatment) {
  if (fit.hierarchical() && treatment.empty())
    throw DataError("hierarchical verdicts are per treatment; pass one");
  const auto& intercept = fit.summary(fit.lambda0_name(treatment));
  const auto& slope = fit.summary(fit.lambda1_name(treatment));
  const auto& var = fit.summary(fit.psi2_name(treatment));
  Verdict v;
  v.psi2_threshold = psi2_threshold;
  v.intercept_zero = intercept.q025 <= 0.0 && 0.0 <= intercept.q975;
  v.slope_nonzero = slope.q025 > 0.0 || slope.q975 < 0.0;
  v.variance_small = var.q50 < psi2_threshold;
  if (!v.slope_nonzero)
    v.label = Verdict::Label::not_supported;
  else if (v.intercept_zero && v.variance_small)
    v.label = Verdict::Label::supported;
  else
    v.label = Verdict::Label::weak;
  return v;
}

std::vector<BandPoint> regression_band(const FitResult& fit, const std::vector<double>& grid,
                                       const std::string& treatment) {
  if (grid.empty()) throw DataError("regression band grid must be non-empty");
  const Eigen::VectorXd l0 = fit.draws(fit.lambda0_name(treatment));
  const Eigen::VectorXd l1 = fit.draws(fit.lambda1_name(treatment));
  std::vector<BandPoint> band;
  band.reserve(grid.size());
  for (const double x : grid) {
    const Eigen::VectorXd v = l0 + x * l1;
    const auto s = mcmc::summarize_draws(v);
    band.push_back({x, s.mean, s.q025, s.q975});
  }
  return band;
}

WidthReduction width_reduction(const std::map<std::string, FitResult>& subgroup,
                               const FitResult& hier) {
  if (!hier.hierarchical()) throw DataError("width_reduction needs a hierarchical fit");
  if (subgroup.empty()) throw TreatmentMismatch("no subgroup fits supplied");
  WidthReduction wr;
  auto width = [](const mcmc::PosteriorSummary& s) { return s.q975 - s.q025; };
  for (const auto& [t, fit] : subgroup) {
    if (std::find(hier.treatments.begin(), hier.treatments.end(), t) == hier.treatments.end())
      throw TreatmentMismatch("treatment '" + t + "' is not in the hierarchical fit");
    WidthReduction::Row row;
    row.treatment = t;
    const double ws_slope = width(fit.summary(fit.lambda1_name()));
    const double wh_slope = width(hier.summary(hier.lambda1_name(t)));
    row.slope = ws_slope == 0.0 ? 0.0 : (ws_slope - wh_slope) / ws_slope;
    const double ws_psi = width(fit.summary(fit.psi2_name()));
    const double wh_psi = width(hier.summary(hier.psi2_name(t)));
    row.psi2 = ws_psi == 0.0 ? 0.0 : (ws_psi - wh_psi) / ws_psi;
    wr.rows.push_back(row);
  }
  auto summarize_rows = [&](auto get, double& avg, double& mn, double& mx) {
    avg = 0.0;
    mn = std::numeric_limits<double>::infinity();
    mx = -std::numeric_limits<double>::infinity();
    for (const auto& r : wr.rows) {
      const double v = get(r);
      avg += v;
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    avg /= static_cast<double>(wr.rows.size());
  };
  summarize_rows([](const WidthReduction::Row& r) { return r.slope; }, wr.slope_avg, wr.slope_min,
                 wr.slope_max);
  summarize_rows([](const WidthReduction::Row& r) { return r.psi2; }, wr.psi2_avg, wr.psi2_min,
                 wr.psi2_max);
  return wr;
}

}  // namespace surrmeta
