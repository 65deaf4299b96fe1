#pragma once

#include "iseg/error.hpp"
#include "iseg/tensor.hpp"
#include "iseg/rng.hpp"
#include "iseg/parallel.hpp"
#include "iseg/imaging.hpp"
#include "iseg/binary_io.hpp"
#include "iseg/scenegen.hpp"
#include "iseg/autograd.hpp"
#include "iseg/ops.hpp"
#include "iseg/losses.hpp"
#include "iseg/metrics.hpp"
#include "iseg/network.hpp"
#include "iseg/optim.hpp"
#include "iseg/train.hpp"
