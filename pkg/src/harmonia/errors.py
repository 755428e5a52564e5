"""Exception types shared across the package.

Everything raised on purpose derives from HarmoniaError so callers can
catch one base class at the CLI/service boundary and map it to an exit
code or HTTP error. Keep constructors trivial: message plus optional
structured fields, no logic.
"""

from __future__ import annotations


class HarmoniaError(Exception):
    """Base class for all deliberate failures."""

    code = "INTERNAL"


class InputError(HarmoniaError):
    """Bad user-supplied input (images, masks, configs, manifests)."""

    code = "BAD_INPUT"


class MaskShapeError(InputError):
    """Mask dimensions do not match the image dimensions."""

    code = "MASK_SHAPE"

    def __init__(self, image_shape, mask_shape):
        self.image_shape = tuple(image_shape)
        self.mask_shape = tuple(mask_shape)
        super().__init__(
            f"mask shape {self.mask_shape} does not match image shape {self.image_shape[:2]}"
        )


class DegenerateMaskError(InputError):
    """Mask selects no pixels, or every pixel."""

    code = "DEGENERATE_MASK"


class MaskOverlapError(InputError):
    """Two foreground masks in a multi-object case share pixels."""

    code = "MASK_OVERLAP"


class DescriptionParseError(InputError):
    """Provider text could not be parsed into a condition description."""

    code = "DESCRIPTION_PARSE"


class ConfigError(InputError):
    """Run configuration is malformed or internally inconsistent."""

    code = "BAD_CONFIG"


class ProviderUnavailable(HarmoniaError):
    """The description provider failed after its retry budget."""

    code = "PROVIDER_UNAVAILABLE"


class BackendUnavailable(HarmoniaError):
    """The requested diffusion backend cannot be constructed here."""

    code = "BACKEND_UNAVAILABLE"


class BackendNumericsError(HarmoniaError):
    """A backend produced non-finite latents or noise predictions."""

    code = "BACKEND_NUMERICS"


class DegenerateAttentionError(HarmoniaError):
    """An aggregated attention map is identically zero, so the
    max-normalized objective is undefined."""

    code = "DEGENERATE_ATTENTION"


class RefinementDiverged(HarmoniaError):
    """Embedding refinement produced non-finite values.

    The last finite iterate is attached so callers can fall back to it.
    """

    code = "REFINEMENT_DIVERGED"

    def __init__(self, message, last_finite=None):
        self.last_finite = last_finite
        super().__init__(message)


class NoConditionTokens(HarmoniaError):
    """A prompt contains no condition-tagged tokens to refine or swap."""

    code = "NO_CONDITION_TOKENS"


class EvaluatorUnavailable(HarmoniaError):
    """No usable evaluator (missing weights, bad artifact, ...)."""

    code = "EVALUATOR_UNAVAILABLE"


class LabelDegeneracyError(InputError):
    """Evaluator training data has every label on one side of 0.5."""

    code = "LABEL_DEGENERACY"


class IterationFailed(HarmoniaError):
    """A harmonization iteration failed irrecoverably.

    Carries the pipeline stage (tokens, invert, refine, edit, decode,
    composite) where the failure occurred.
    """

    code = "ITERATION_FAILED"

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
