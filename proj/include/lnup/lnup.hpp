#pragma once

#include "lnup/core.hpp"
#include "lnup/corpus.hpp"
#include "lnup/failpred.hpp"
#include "lnup/features.hpp"
#include "lnup/image.hpp"
#include "lnup/imgproc.hpp"
#include "lnup/lineup.hpp"
#include "lnup/pipeline.hpp"
#include "lnup/simindex.hpp"
