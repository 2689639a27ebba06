#pragma once

#include "unirep/checkpoint.hpp"
#include "unirep/data.hpp"
#include "unirep/errors.hpp"
#include "unirep/fusion.hpp"
#include "unirep/harness.hpp"
#include "unirep/moddrop.hpp"
#include "unirep/model.hpp"
#include "unirep/nn_ops.hpp"
#include "unirep/ops.hpp"
#include "unirep/optim.hpp"
#include "unirep/rng.hpp"
#include "unirep/tensor.hpp"
#include "unirep/text.hpp"
