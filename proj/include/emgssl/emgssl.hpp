#pragma once

#include "emgssl/error.hpp"
#include "emgssl/rng.hpp"
#include "emgssl/signal.hpp"
#include "emgssl/features.hpp"
#include "emgssl/synthgen.hpp"
#include "emgssl/labeling.hpp"
#include "emgssl/augment.hpp"
#include "emgssl/neural.hpp"
#include "emgssl/vicreg.hpp"
#include "emgssl/lda.hpp"
#include "emgssl/metrics.hpp"
#include "emgssl/io.hpp"
#include "emgssl/experiments.hpp"
