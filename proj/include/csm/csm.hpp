#pragma once

#include "csm/types.hpp"
#include "csm/core.hpp"
#include "csm/dual.hpp"
#include "csm/likelihood.hpp"
#include "csm/optimize.hpp"
#include "csm/estimation.hpp"
#include "csm/simulate.hpp"
#include "csm/selection.hpp"
#include "csm/bootstrap.hpp"
