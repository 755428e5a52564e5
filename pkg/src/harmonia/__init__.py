"""Zero-shot image harmonization.

The pipeline describes the imaging conditions of a composite's foreground
and background with a vision-language provider, edits the foreground in
diffusion latent space toward the background's condition, and iterates
under an evaluator until the result is judged harmonious.
"""

__version__ = "0.1.0"

from .errors import HarmoniaError  # noqa: F401
from .imagecore import CompositeCase, ForegroundMask, RasterImage, load_case  # noqa: F401
