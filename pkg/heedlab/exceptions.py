"""
Density-weighted residual alignment laboratory.

Every error raised on purpose by the lab derives from HeedError and carries a
stable ``code`` so the CLI can report it as machine-readable JSON.
"""
from typing import Dict


class HeedError(Exception):
    code = "heed_error"

    def as_dict(self) -> Dict[str, str]:
        return {"error": self.code, "message": str(self)}


class DensityError(HeedError):
    code = "density"


class CacheError(HeedError):
    code = "cache"


class BadMagic(CacheError):
    code = "bad_magic"


class BadVersion(CacheError):
    code = "bad_version"


class Truncated(CacheError):
    code = "truncated"


class Misaligned(CacheError):
    code = "misaligned"


class DuplicateSample(CacheError):
    code = "duplicate_sample"


class QuantizationRangeError(CacheError):
    code = "quantization_range"


class LossError(HeedError):
    code = "loss"


class ShapeMismatch(LossError):
    code = "shape_mismatch"


class EmptyLossSupport(LossError):
    code = "empty_loss_support"


class InvalidWeights(LossError):
    code = "invalid_weights"


class InvalidSelection(LossError):
    code = "invalid_selection"


class FisherError(HeedError):
    code = "fisher"


class StatisticsError(HeedError):
    code = "statistics"


class RankDeficient(StatisticsError):
    code = "rank_deficient"


class BootstrapFailure(StatisticsError):
    code = "bootstrap_failure"

    def __init__(self, index: int, cause: BaseException) -> None:
        super().__init__(f"statistic failed on resample {index}: {cause}")
        self.index = index
        self.cause = cause


class DiagnosticsError(HeedError):
    code = "diagnostics"


class ModelError(HeedError):
    code = "model"


class CompetenceError(ModelError):
    code = "competence"


class SequenceTooLong(ModelError):
    code = "sequence_too_long"


class RatioError(ModelError):
    code = "ratio"


class DistillError(ModelError):
    code = "distill"


class ConfigError(HeedError):
    code = "config"


class ReportError(HeedError):
    code = "report"


class ConfigHashMismatch(ReportError):
    code = "config_hash_mismatch"


class NothingToRun(ReportError):
    code = "nothing_to_run"


class OutputLocked(HeedError):
    code = "locked"
