"""Select-and-rerank visual question answering at desk scale."""
from .artifacts import TOOL_VERSION as __version__

__all__ = ["__version__"]
