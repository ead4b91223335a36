#pragma once

#include "reachctl/core.hpp"
#include "reachctl/geometry.hpp"
#include "reachctl/lti_model.hpp"
#include "reachctl/tightening.hpp"
#include "reachctl/qp.hpp"
#include "reachctl/mpc.hpp"
#include "reachctl/closed_loop.hpp"
#include "reachctl/abstraction.hpp"
#include "reachctl/dp.hpp"
#include "reachctl/stats.hpp"
