#pragma once

#include "flatminima/common.hpp"
#include "flatminima/experiment.hpp"
#include "flatminima/hessian.hpp"
#include "flatminima/io.hpp"
#include "flatminima/moments.hpp"
#include "flatminima/network.hpp"
#include "flatminima/random.hpp"
#include "flatminima/sampler.hpp"
#include "flatminima/scalar.hpp"
#include "flatminima/trainer.hpp"
#include "flatminima/widest.hpp"
