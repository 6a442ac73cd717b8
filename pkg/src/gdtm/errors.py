"""Exception hierarchy shared by all gdtm modules."""


class GDTMError(Exception):
    """Base class for all errors raised by gdtm."""


class KernelSpecError(GDTMError, ValueError):
    pass


class DomainError(GDTMError, ValueError):
    """An argument lies outside the domain of a formula (e.g. negative Wiener time)."""


class SingularKernelError(GDTMError, ArithmeticError):
    pass


class PipelineError(GDTMError):
    """Preprocessing produced an unusable result (empty vocabulary, no documents)."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class SplitError(GDTMError, ValueError):
    pass


class NumericError(GDTMError, ArithmeticError):
    pass


class UnknownWordError(GDTMError, KeyError):
    def __init__(self, word, suggestions=()):
        self.word = word
        self.suggestions = list(suggestions)
        hint = f"; did you mean {', '.join(self.suggestions)}?" if self.suggestions else ""
        super().__init__(f"unknown word {word!r}{hint}")

    def __str__(self):
        return self.args[0]


class CheckpointError(GDTMError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


class CorpusFormatError(GDTMError):
    pass
