#pragma once

#include <stdexcept>
#include <string>

namespace mmcl {

// Every failure mode in the engine maps to one of these. Call sites catch the
// narrowest type they can recover from; the CLI maps them onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidShape : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct LabelError : Error { using Error::Error; };
struct TapeError : Error { using Error::Error; };
struct OptimizerError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };  // NaN/Inf escaped a pass

struct TokenBudgetError : Error { using Error::Error; };
struct VocabError : Error { using Error::Error; };
struct AdapterError : Error { using Error::Error; };
struct HeadError : Error { using Error::Error; };
struct ExtendError : Error { using Error::Error; };
struct MaskError : Error { using Error::Error; };
struct StateError : Error { using Error::Error; };

struct GenerationError : Error { using Error::Error; };
struct VariantError : Error { using Error::Error; };
struct SampleError : Error { using Error::Error; };

struct MetricError : Error { using Error::Error; };
struct DegenerateBaseline : Error { using Error::Error; };
struct ReportError : Error { using Error::Error; };

struct CheckpointError : Error { using Error::Error; };
struct LedgerError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

}  // namespace mmcl
