#pragma once

#include "vfn/autograd.hpp"
#include "vfn/backbone.hpp"
#include "vfn/checks.hpp"
#include "vfn/config.hpp"
#include "vfn/cost.hpp"
#include "vfn/error.hpp"
#include "vfn/focal.hpp"
#include "vfn/gradcheck.hpp"
#include "vfn/heatmap.hpp"
#include "vfn/io.hpp"
#include "vfn/ops.hpp"
#include "vfn/random.hpp"
#include "vfn/synthetic.hpp"
#include "vfn/tensor.hpp"
#include "vfn/train.hpp"
#include "vfn/trainer.hpp"
