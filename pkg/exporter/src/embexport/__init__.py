"""Frozen-transformer feature exporter.

Reads GAP-format TSV files, runs a frozen BERT encoder in eval mode, and
writes one float32 embedding row per subword token in the PTEM binary format,
plus a JSON manifest mapping subword tokens to character offsets in the
original text.
"""

__version__ = "0.1.0"
