#pragma once

#include "dpw/analysis.hpp"
#include "dpw/attack.hpp"
#include "dpw/csv.hpp"
#include "dpw/data.hpp"
#include "dpw/dpwn.hpp"
#include "dpw/error.hpp"
#include "dpw/model.hpp"
#include "dpw/ops.hpp"
#include "dpw/parallel.hpp"
#include "dpw/pathway.hpp"
#include "dpw/rng.hpp"
#include "dpw/stats.hpp"
#include "dpw/study.hpp"
#include "dpw/tensor.hpp"
#include "dpw/transforms.hpp"
