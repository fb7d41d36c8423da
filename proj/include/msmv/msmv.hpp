#pragma once

#include "msmv/config.hpp"
#include "msmv/errors.hpp"
#include "msmv/experiments.hpp"
#include "msmv/integrator.hpp"
#include "msmv/measure.hpp"
#include "msmv/model.hpp"
#include "msmv/parallel.hpp"
#include "msmv/paths.hpp"
#include "msmv/poisson.hpp"
#include "msmv/rng.hpp"
#include "msmv/stats.hpp"
