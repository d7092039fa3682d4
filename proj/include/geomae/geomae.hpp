#pragma once

#include "geomae/common.hpp"
#include "geomae/geometry.hpp"
#include "geomae/tensor.hpp"
#include "geomae/autograd.hpp"
#include "geomae/nn.hpp"
#include "geomae/config.hpp"
#include "geomae/gate.hpp"
#include "geomae/attention.hpp"
#include "geomae/mae.hpp"
#include "geomae/data_io.hpp"
#include "geomae/training.hpp"
#include "geomae/oracles.hpp"
#include "geomae/selfcheck.hpp"
