"""Exception types raised by the package.

Everything derives from SpeechselError so callers (and the CLI exit-code
mapping) can catch one base class per failure family.
"""


class SpeechselError(Exception):
    """Base class for all package errors."""


class ConfigError(SpeechselError):
    """Invalid or inconsistent configuration."""


class DataError(SpeechselError):
    """Malformed or missing input data / artifacts."""


class NumericalError(SpeechselError):
    """A numerical routine failed to produce a usable result."""


# --- numerics ---------------------------------------------------------------

class EmptyMask(DataError):
    """Loss mask selects no positions."""


class IndexOutOfRange(DataError):
    """A token / target index lies outside the valid range."""


class ShapeMismatch(DataError):
    """Array shapes are inconsistent with the operation's contract."""


class UnknownParameter(DataError):
    """A gradient or lookup references a parameter name not in the store."""


class NonDeterministicLoss(NumericalError):
    """Two evaluations of the same loss at identical parameters differed."""


class EmptyTrainableSet(ConfigError):
    """No parameter is marked trainable."""


# --- rvq tokenizer ----------------------------------------------------------

class EmptyWaveform(DataError):
    """Waveform contains no samples."""


class InsufficientData(DataError):
    """Fewer frames than codewords to train."""


class DimensionMismatch(DataError):
    """Feature dimension differs between data and codebooks."""


class AlreadyFiltered(DataError):
    """Grid has already had its first layer dropped."""


class SingleLayerGrid(DataError):
    """Grid has only one layer; dropping it would leave nothing."""


# --- token selection --------------------------------------------------------

class UnknownToken(DataError):
    """Token id falls outside the multimodal vocabulary."""


class TargetUnreachable(NumericalError):
    """No lambda in the search bracket reaches the requested support size."""


class CountExceedsVocab(ConfigError):
    """Requested more random tokens than the observed vocabulary holds."""


# --- fusion LM --------------------------------------------------------------

class EmptyText(DataError):
    """Fused sequence would contain no text tokens."""


class ContextOverflow(DataError):
    """Sequence longer than the model context even after truncation."""


class NoAudioPositions(DataError):
    """A sequence offers no audio positions for the CLM loss."""


class NoTrainableParams(ConfigError):
    """Training was requested but nothing is trainable."""


class UnknownTarget(ConfigError):
    """LoRA target names a parameter that does not exist or is not 2-D."""


class MissingHead(ConfigError):
    """Classification requested without a classifier head."""


# --- experiment -------------------------------------------------------------

class EmptySplit(DataError):
    """A required corpus split has no records."""


class HeterogeneousHeads(DataError):
    """Bagging members disagree on the number of classes."""


# --- eval metrics -----------------------------------------------------------

class LengthMismatch(DataError):
    """Gold and predicted label sequences differ in length."""


class LabelOutOfRange(DataError):
    """A label lies outside [0, n_classes)."""


# --- corpus -----------------------------------------------------------------

class SchemaError(DataError):
    """A corpus record violates the JSONL schema."""


class UnknownLabel(DataError):
    """Label string is not part of the task's label set."""


class InvalidSpec(ConfigError):
    """Synthetic corpus specification is inconsistent."""


class EmptyCorpus(DataError):
    """No records to compute statistics over."""


# --- cli --------------------------------------------------------------------

class MissingPrerequisite(DataError):
    """A pipeline stage ran before the artifacts it needs exist."""


class InvalidConfig(ConfigError):
    """Pipeline config file is malformed or has unknown keys."""


class LockHeld(ConfigError):
    """Another invocation holds the run directory lock."""
