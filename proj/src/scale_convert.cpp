#include "surrmeta/scale_convert.hpp"

#include <algorithm>

namespace surrmeta {

double tracer_slope(Tracer t) {
  switch (t) {
    case Tracer::florbetapir: return 183.0;
    case Tracer::florbetaben: return 153.4;
    case Tracer::flutemetamol: return 116.0;
    case Tracer::other: break;
  }
  throw UnknownTracer("no published Centiloid map for tracer 'other'");
}

double effective_slope(const std::set<Tracer>& tracers) {
  if (tracers.empty()) throw UnknownTracer("no tracer recorded for this contrast");
  double sum = 0.0;
  for (const auto t : tracers) sum += tracer_slope(t);
  return sum / static_cast<double>(tracers.size());
}

std::pair<double, double> centiloid_delta_from_suvr(const std::set<Tracer>& tracers, double d_suvr,
                                                    double se_suvr) {
  const double slope = effective_slope(tracers);
  return {slope * d_suvr, slope * se_suvr};
}

std::pair<double, double> suvr_delta_from_centiloid(const std::set<Tracer>& tracers, double d_cl,
                                                    double se_cl) {
  const double slope = effective_slope(tracers);
  return {d_cl / slope, se_cl / slope};
}

Dataset harmonize_surrogate_scale(const Dataset& d, SurrogateScale target) {
  std::vector<std::string> blocked;
  for (const auto& c : d.contrasts) {
    if (c.surrogate_scale == target) continue;
    try {
      effective_slope(c.tracers);
    } catch (const UnknownTracer&) {
      if (std::find(blocked.begin(), blocked.end(), c.study_id) == blocked.end())
        blocked.push_back(c.study_id);
    }
  }
  if (!blocked.empty()) {
    std::string msg = blocked.size() > 1 ? "cannot convert surrogate scale for studies: "
                                         : "cannot convert surrogate scale for study ";
    for (std::size_t i = 0; i < blocked.size(); ++i) msg += (i ? ", " : "") + blocked[i];
    throw UnknownTracer(msg);
  }

  Dataset out;
  out.provenance = d.provenance;
  out.contrasts.reserve(d.contrasts.size());
  for (auto c : d.contrasts) {
    if (c.surrogate_scale != target) {
      const auto [y, se] = target == SurrogateScale::centiloid
                               ? centiloid_delta_from_suvr(c.tracers, c.y1, c.se1)
                               : suvr_delta_from_centiloid(c.tracers, c.y1, c.se1);
      c.y1 = y;
      c.se1 = se;
      c.surrogate_scale = target;
      c.imputed_scale = true;
    }
    out.contrasts.push_back(std::move(c));
  }
  return out;
}

}  // namespace surrmeta
