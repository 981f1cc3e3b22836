#pragma once

#include "costcast/core_data.hpp"
#include "costcast/error.hpp"
#include "costcast/estimators.hpp"
#include "costcast/evaluation.hpp"
#include "costcast/forests.hpp"
#include "costcast/policy.hpp"
#include "costcast/simulation.hpp"
