#pragma once

#include "prefclust/btl.hpp"
#include "prefclust/clustering.hpp"
#include "prefclust/eval.hpp"
#include "prefclust/policy.hpp"
#include "prefclust/preference_data.hpp"
#include "prefclust/reward_models.hpp"
#include "prefclust/simulator.hpp"
