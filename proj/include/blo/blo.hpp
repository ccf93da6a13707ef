#pragma once

// Umbrella header for the solver core.
#include "blo/constraints.hpp"
#include "blo/core.hpp"
#include "blo/driver.hpp"
#include "blo/errors.hpp"
#include "blo/estimate.hpp"
#include "blo/ihvp.hpp"
#include "blo/implicit.hpp"
#include "blo/lower.hpp"
#include "blo/report.hpp"
#include "blo/unroll.hpp"
#include "blo/valuefn.hpp"
