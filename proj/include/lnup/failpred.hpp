#pragma once

#include "lnup/failpred/dataset.hpp"
#include "lnup/failpred/ensemble.hpp"
#include "lnup/failpred/metrics.hpp"
#include "lnup/failpred/models.hpp"
