"""Exception types shared across the workbench."""


class RepHardenError(Exception):
    """Base class for all package errors."""


class ParseError(RepHardenError):
    """Raised for malformed JSON input; carries the line number for JSONL files."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(RepHardenError):
    """A report category holds an entry that violates the schema."""

    def __init__(self, category, index, message="invalid entry"):
        super().__init__(f"{category}[{index}]: {message}")
        self.category = category
        self.index = index


class EmptyClassError(RepHardenError):
    """No reports of the requested class were found in the corpus."""


class IoError(RepHardenError):
    """Reading or writing a dataset file failed."""


class VocabError(RepHardenError):
    """A vocabulary required for payload synthesis is empty."""


class BudgetExhausted(RepHardenError):
    """The perturbation budget was already spent before the action."""


class CandidateRejected(RepHardenError):
    """An attack candidate is not classified as its source class."""


class EpisodeFinished(RepHardenError):
    """step() was called on an episode that already terminated."""


class NumericalError(RepHardenError):
    """Non-finite values encountered in classifier weights or outputs."""


class PolicyNumericalError(RepHardenError):
    """Non-finite logits encountered in the attack policy."""


class TrainingDiverged(RepHardenError):
    """Training loss became non-finite."""


class CollapseError(RepHardenError):
    """Clean accuracy fell below the configured floor during hardening."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class CheckpointError(RepHardenError):
    """Checkpoint file is unreadable or incompatible with the caller."""


class SpecError(RepHardenError):
    """A corpus specification is internally inconsistent."""


class SplitError(RepHardenError):
    """Requested split ratios produce an empty or invalid split."""


class ConfigError(RepHardenError):
    """A configuration value is out of its documented range."""
