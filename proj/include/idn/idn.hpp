#pragma once

#include "idn/bench.hpp"
#include "idn/config.hpp"
#include "idn/image_io.hpp"
#include "idn/injection.hpp"
#include "idn/losses.hpp"
#include "idn/model_io.hpp"
#include "idn/network.hpp"
#include "idn/synthetic.hpp"
#include "idn/trainer.hpp"
#include "idn/verify.hpp"
