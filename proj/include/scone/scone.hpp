#ifndef SCONE_SCONE_HPP_
#define SCONE_SCONE_HPP_

#include "scone/checkpoint.hpp"
#include "scone/config.hpp"
#include "scone/dataset.hpp"
#include "scone/error.hpp"
#include "scone/losses.hpp"
#include "scone/metrics.hpp"
#include "scone/model.hpp"
#include "scone/sampling.hpp"
#include "scone/synthetic.hpp"
#include "scone/taxonomy.hpp"
#include "scone/trainer.hpp"
#include "scone/vocabulary.hpp"

#endif  // SCONE_SCONE_HPP_
