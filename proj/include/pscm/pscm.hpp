#pragma once

#include "pscm/clustering.hpp"
#include "pscm/config.hpp"
#include "pscm/covariates.hpp"
#include "pscm/csv.hpp"
#include "pscm/dates.hpp"
#include "pscm/effects.hpp"
#include "pscm/error.hpp"
#include "pscm/inference.hpp"
#include "pscm/ingestion.hpp"
#include "pscm/panel.hpp"
#include "pscm/parallel.hpp"
#include "pscm/pipeline.hpp"
#include "pscm/propensity.hpp"
#include "pscm/rng.hpp"
#include "pscm/simgen.hpp"
#include "pscm/solver.hpp"
