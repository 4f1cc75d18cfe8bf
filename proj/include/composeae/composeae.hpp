#pragma once

#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "evaluation.hpp"
#include "gradcheck.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "random.hpp"
#include "tensor.hpp"
#include "training.hpp"
