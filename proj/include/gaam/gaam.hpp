#pragma once

#include "gaam/array.hpp"
#include "gaam/attention.hpp"
#include "gaam/autograd.hpp"
#include "gaam/checkpoint.hpp"
#include "gaam/config.hpp"
#include "gaam/data.hpp"
#include "gaam/decoder.hpp"
#include "gaam/errors.hpp"
#include "gaam/gradcheck.hpp"
#include "gaam/importance.hpp"
#include "gaam/optim.hpp"
#include "gaam/rng.hpp"
