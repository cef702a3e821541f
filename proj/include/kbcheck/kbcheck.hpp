#pragma once

#include "kbcheck/cli.hpp"
#include "kbcheck/corpus.hpp"
#include "kbcheck/error.hpp"
#include "kbcheck/eval.hpp"
#include "kbcheck/evidence.hpp"
#include "kbcheck/index.hpp"
#include "kbcheck/label.hpp"
#include "kbcheck/policy.hpp"
#include "kbcheck/report.hpp"
#include "kbcheck/retriever.hpp"
#include "kbcheck/tokenize.hpp"
#include "kbcheck/verdict.hpp"
