"""Exception types shared across the package."""

from __future__ import annotations


class MusetraceError(Exception):
    """Base class for every error raised by this package."""


# -- MIDI / tokenization ----------------------------------------------------

class MidiError(MusetraceError):
    """Base class for Standard MIDI File problems."""


class MalformedHeader(MidiError):
    """File does not start with a valid MThd header chunk."""


class TruncatedChunk(MidiError):
    """A chunk or event runs past the end of the available bytes."""


class UnsupportedFormat(MidiError):
    """SMF format other than 0 or 1 (format 2 is out of scope)."""


class EmptyInput(MusetraceError):
    """An operation received fewer items than it needs."""


# -- model ------------------------------------------------------------------

class InvalidConfig(MusetraceError):
    """Model configuration violates an invariant."""


class EmptyCorpus(MusetraceError):
    """Training requires at least one example."""


class NonFiniteLoss(MusetraceError):
    """Training loss became NaN or infinite; carries diagnostics."""


class EmptyContext(MusetraceError):
    """next_event_distribution needs at least one context token."""


class EmptyPrompt(MusetraceError):
    """generate needs a non-empty prompt."""


class FormatError(MusetraceError):
    """An artifact file does not match its documented binary layout."""


# -- attribution ------------------------------------------------------------

class EmptyCorpusAfterRemoval(MusetraceError):
    """A removal set covers the whole corpus; nothing is left to train on."""


class SingularKernel(MusetraceError):
    """The projected-gradient kernel is not positive definite at this ridge."""


class DimensionMismatch(MusetraceError):
    """Vector or matrix shapes disagree with the fitted index."""


# -- evaluation -------------------------------------------------------------

class LengthMismatch(MusetraceError):
    """Paired lists must have equal length (and at least three items)."""


# -- royalty ----------------------------------------------------------------

class NegativeAmount(MusetraceError):
    """Revenue records must be non-negative integer cents."""


class ConservationError(MusetraceError):
    """A settlement failed the exact integer-cent conservation check."""


# -- pipeline / CLI ---------------------------------------------------------

class MissingArtifact(MusetraceError):
    """A stage needs an artifact that has not been produced yet."""

    def __init__(self, path: object, hint: str = "") -> None:
        self.path = str(path)
        msg = f"missing artifact: {self.path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)
