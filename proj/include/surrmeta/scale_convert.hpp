#pragma once

#include <set>
#include <utility>

#include "surrmeta/data_model.hpp"

namespace surrmeta {

/// Centiloid units per SUVR unit for one PET tracer. Intercepts of the
/// published calibration lines cancel for change-from-baseline differences,
/// so the slope is the whole map.
double tracer_slope(Tracer t);

/// Mean slope over the tracers used in a trial. Throws UnknownTracer for an
/// empty set or one containing `other` (no published coefficient).
double effective_slope(const std::set<Tracer>& tracers);

/// (d_cl, se_cl) = slope * (d_suvr, se_suvr).
std::pair<double, double> centiloid_delta_from_suvr(const std::set<Tracer>& tracers, double d_suvr,
                                                    double se_suvr);

/// Exact inverse of the forward map.
std::pair<double, double> suvr_delta_from_centiloid(const std::set<Tracer>& tracers, double d_cl,
                                                    double se_cl);

/// Returns a copy of the dataset with every contrast on the target scale;
/// converted rows get imputed_scale = true. Throws UnknownTracer naming the
/// studies whose rows cannot be mapped.
Dataset harmonize_surrogate_scale(const Dataset& d, SurrogateScale target);

}  // namespace surrmeta
