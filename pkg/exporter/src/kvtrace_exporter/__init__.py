"""Attention-trace exporter for HuggingFace causal LMs."""

from .export import ExportError, ExportJob, export
from .trace_writer import TRACE_VERSION, TraceWriteError, write_trace_file

__version__ = "0.1.0"
