#pragma once

#include "dcg/autodiff.hpp"
#include "dcg/data.hpp"
#include "dcg/fairness.hpp"
#include "dcg/flows.hpp"
#include "dcg/graph.hpp"
#include "dcg/graph_spec.hpp"
#include "dcg/random.hpp"
#include "dcg/table.hpp"
#include "dcg/training.hpp"
#include "dcg/units.hpp"
