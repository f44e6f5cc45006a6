#pragma once

#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "diagnostics.hpp"
#include "elements.hpp"
#include "equivariance.hpp"
#include "errors.hpp"
#include "featurization.hpp"
#include "geometry.hpp"
#include "memory.hpp"
#include "model.hpp"
#include "nn.hpp"
#include "parallel.hpp"
#include "potential.hpp"
#include "spherical_harmonics.hpp"
#include "tensor.hpp"
#include "training.hpp"
