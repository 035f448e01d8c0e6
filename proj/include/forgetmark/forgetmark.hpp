#pragma once

#include "ablation.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "error.hpp"
#include "fp_construct.hpp"
#include "http_client.hpp"
#include "keygen_client.hpp"
#include "lora.hpp"
#include "manifest.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "parallel.hpp"
#include "pipeline.hpp"
#include "robustness.hpp"
#include "rouge.hpp"
#include "serve.hpp"
#include "stealth.hpp"
#include "tensor.hpp"
#include "toy_world.hpp"
#include "train.hpp"
#include "unlearn.hpp"
#include "verify.hpp"
#include "vocab.hpp"
