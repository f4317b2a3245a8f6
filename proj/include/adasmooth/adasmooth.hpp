#pragma once

#include "adasmooth/augment.hpp"
#include "adasmooth/csvio.hpp"
#include "adasmooth/experiments.hpp"
#include "adasmooth/gradcheck.hpp"
#include "adasmooth/kernel.hpp"
#include "adasmooth/objective.hpp"
#include "adasmooth/paramnet.hpp"
#include "adasmooth/phantom.hpp"
#include "adasmooth/smooth.hpp"
#include "adasmooth/stats.hpp"
#include "adasmooth/trainer.hpp"
#include "adasmooth/volume.hpp"
