"""
Error types raised by graphemelab operations.

Every error carries the fields that identify the failure as attributes, so the
CLI can report them verbatim in its JSON result:

    {"success": false, "error": "<message>", "error_type": "<class name>"}
"""


class LabError(Exception):
    """Base class for every domain error in graphemelab."""


# ============================================================================
# Corpus
# ============================================================================

class UnsupportedCharacter(LabError):
    def __init__(self, position: int, char: str):
        self.position = position
        self.char = char
        super().__init__(f"unsupported character {char!r} at position {position}")


class InsufficientData(LabError):
    pass


class UnknownSymbol(LabError):
    def __init__(self, split: str, symbol: str):
        self.split = split
        self.symbol = symbol
        super().__init__(f"symbol {symbol!r} in split '{split}' is not in the training vocabulary")


# ============================================================================
# Numerics
# ============================================================================

class ShapeMismatch(LabError):
    def __init__(self, operation: str, *shapes: tuple[int, ...]):
        self.operation = operation
        self.shapes = shapes
        listed = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{operation}: incompatible shapes {listed}")


class NonFiniteValue(LabError):
    pass


class IndexOutOfVocabulary(LabError):
    def __init__(self, index: int, size: int):
        self.index = index
        self.size = size
        super().__init__(f"index {index} outside vocabulary of size {size}")


class DegenerateDistribution(LabError):
    pass


class NonFiniteLoss(LabError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite loss at step {step}")


# ============================================================================
# Acoustic proxy
# ============================================================================

class EmptyPhonemeSequence(LabError):
    def __init__(self, utterance_id: str):
        self.utterance_id = utterance_id
        super().__init__(f"utterance '{utterance_id}' has no phonemes")


# ============================================================================
# CTC and probing
# ============================================================================

class TargetTooLong(LabError):
    def __init__(self, frames: int, required: int):
        self.frames = frames
        self.required = required
        super().__init__(f"target needs at least {required} frames, got {frames}")


class ProblemTooLarge(LabError):
    pass


class MissingEncoder(LabError):
    pass


class AllUtterancesSkipped(LabError):
    def __init__(self, skipped: int):
        self.skipped = skipped
        super().__init__(f"all {skipped} utterances violate the CTC length constraint")


class WidthMismatch(LabError):
    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"feature width {actual} does not match probe input width {expected}")


class WrongProbeMode(LabError):
    pass


# ============================================================================
# Metrics and analysis
# ============================================================================

class EmptyReference(LabError):
    def __init__(self, utterance_id: str | None = None):
        self.utterance_id = utterance_id
        where = f" for utterance '{utterance_id}'" if utterance_id else ""
        super().__init__(f"empty reference sequence{where}")


class PerplexityInfeasible(LabError):
    pass


class TooFewRecords(LabError):
    def __init__(self, count: int, k: int):
        self.count = count
        self.k = k
        super().__init__(f"need more than {k} records, got {count}")


class PositionOutOfRange(LabError):
    def __init__(self, position: int, length: int):
        self.position = position
        self.length = length
        super().__init__(f"position {position} outside sequence of length {length}")


class IoFailure(LabError):
    pass


# ============================================================================
# Configuration, checkpoints and run directories
# ============================================================================

class ConfigError(LabError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        prefix = f"line {line}: " if line else ""
        super().__init__(f"{prefix}{message}")


class BadMagic(LabError):
    pass


class UnsupportedVersion(LabError):
    def __init__(self, version: int):
        self.version = version
        super().__init__(f"unsupported checkpoint version {version}")


class TruncatedFile(LabError):
    def __init__(self, tensor_name: str):
        self.tensor_name = tensor_name
        super().__init__(f"checkpoint truncated while reading '{tensor_name}'")


class MissingInput(LabError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing input: {name}")
