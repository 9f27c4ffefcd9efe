"""Artist recognition from song audio: i-vectors, a small convnet, PLDA scoring and fusion."""

from . import backend, deepnet, dsp, evalkit, tvspace, ubm
from .errors import IvxError

__version__ = "0.1.0"

__all__ = ["IvxError", "backend", "deepnet", "dsp", "evalkit", "tvspace", "ubm"]
