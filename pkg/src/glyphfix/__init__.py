"""Unsupervised correction of OCR substitution errors through glyph clustering."""

from .model import Detection, LineRecord, PipelineConfig, SubCollection, load_manifest, write_corrected

__all__ = ["Detection", "LineRecord", "PipelineConfig", "SubCollection", "load_manifest", "write_corrected"]
__version__ = "0.1.0"
