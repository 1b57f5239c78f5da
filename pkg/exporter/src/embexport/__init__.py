"""Embedding exporter for composed-retrieval datasets."""

from .datasets import DatasetLayoutError, parse_dataset
from .encoders import PatchStatEncoder, build_encoder, preprocess_image
from .export import ExportJob, ExportReport, ValidationFailed, export
from .formats import write_embedding_file, write_manifest_file

__version__ = "0.1.0"

__all__ = [
    "DatasetLayoutError",
    "ExportJob",
    "ExportReport",
    "PatchStatEncoder",
    "ValidationFailed",
    "build_encoder",
    "export",
    "parse_dataset",
    "preprocess_image",
    "write_embedding_file",
    "write_manifest_file",
]
