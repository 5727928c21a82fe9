#pragma once

#include "fairrank/error.hpp"
#include "fairrank/log.hpp"
#include "fairrank/random.hpp"
#include "fairrank/dataset.hpp"
#include "fairrank/plmodel.hpp"
#include "fairrank/metrics.hpp"
#include "fairrank/riskcontrol.hpp"
#include "fairrank/harness.hpp"
