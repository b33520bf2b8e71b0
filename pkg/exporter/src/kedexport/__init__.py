"""kedexport: encode labeled image folders into KED embedding files."""

from .errors import ExportError
from .export import ExportJob, export_image_embeddings, export_text_prototypes, scan_dataset

__version__ = "0.1.0"

__all__ = [
    "ExportError",
    "ExportJob",
    "scan_dataset",
    "export_image_embeddings",
    "export_text_prototypes",
    "__version__",
]
