"""Masked LM extraction pipeline producing pairjoint record files."""

__version__ = "0.1.0"

from .extraction import (
    ExtractionError,
    ExtractionJob,
    extract,
    load_model,
    masked_pair_conditional,
)
from .records import (
    ExtractedRecord,
    TruncatedMatrix,
    read_records,
    top_k_indices,
    write_records,
)
from .syntax import SentenceParse, annotate_syntactic_distance, read_parses, tree_distance

__all__ = [
    "ExtractedRecord",
    "ExtractionError",
    "ExtractionJob",
    "SentenceParse",
    "TruncatedMatrix",
    "annotate_syntactic_distance",
    "extract",
    "load_model",
    "masked_pair_conditional",
    "read_parses",
    "read_records",
    "top_k_indices",
    "tree_distance",
    "write_records",
]
