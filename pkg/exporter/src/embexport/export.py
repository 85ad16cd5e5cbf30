"""Export frozen BERT activations for GAP text into PTEM files."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ptem
from .tokenize import load_tokenizer

MODEL_SIZES = {
    # hidden size, layer count, default layer selection (1-based encoder
    # layers; hidden_states[k] is the output of encoder layer k)
    "base": {"hidden": 768, "layers": 12, "select": [9, 10, 11, 12],
             "name": "bert-base-uncased"},
    "large": {"hidden": 1024, "layers": 24, "select": [19, 20, 21, 22],
              "name": "bert-large-uncased"},
}

FALLBACK_INIT_SEED = 1234


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    input_tsv: str
    model_size: str = "base"
    out_ptem: str = "embeddings.ptem"
    layers: list = field(default_factory=list)  # empty -> size default
    weights: str = ""  # pretrained checkpoint dir; empty -> deterministic init
    max_tokens: int = 512

    def __post_init__(self):
        if self.model_size not in MODEL_SIZES:
            raise ExportError(f"unknown model size {self.model_size!r}")
        info = MODEL_SIZES[self.model_size]
        if not self.layers:
            self.layers = list(info["select"])
        bad = [l for l in self.layers if not 1 <= l <= info["layers"]]
        if bad:
            raise ExportError(
                f"layer selection {bad} outside 1..{info['layers']} for "
                f"{self.model_size}")
        self.layers = sorted(self.layers)

    @property
    def dim(self):
        return len(self.layers) * MODEL_SIZES[self.model_size]["hidden"]


def read_gap_rows(tsv_path):
    with open(tsv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f, delimiter="\t")
        cols = reader.fieldnames or []
        if "ID" not in cols or "Text" not in cols:
            raise ExportError(f"{tsv_path}: not a GAP TSV (need ID and Text)")
        rows = [(row["ID"], row["Text"]) for row in reader]
    ids = [doc_id for doc_id, _ in rows]
    if len(set(ids)) != len(ids):
        raise ExportError(f"{tsv_path}: duplicate document IDs")
    return rows


def load_model(job, vocab_size):
    from transformers import BertConfig, BertModel
    if job.weights:
        model = BertModel.from_pretrained(job.weights)
    else:
        info = MODEL_SIZES[job.model_size]
        config = BertConfig(
            vocab_size=vocab_size,
            hidden_size=info["hidden"],
            num_hidden_layers=info["layers"],
            num_attention_heads=info["hidden"] // 64,
            intermediate_size=4 * info["hidden"],
        )
        # no checkpoint available: deterministic seeded initialization so
        # repeated exports are bit-identical
        torch.manual_seed(FALLBACK_INIT_SEED)
        model = BertModel(config)
    model.eval()
    return model


def export(job):
    """Run the frozen encoder over every document and write PTEM + manifest."""
    torch.set_num_threads(1)
    tokenizer = load_tokenizer(job.weights or None)
    rows = read_gap_rows(job.input_tsv)
    model = load_model(job, tokenizer.vocab_size)

    matrices = {}
    manifest = {}
    with torch.no_grad():
        for doc_id, text in rows:
            ids, tokens, offsets = tokenizer.encode(text)
            if not ids:
                raise ExportError(f"doc {doc_id!r}: no tokens in text")
            if len(ids) + 2 > job.max_tokens:
                raise ExportError(
                    f"doc {doc_id!r}: {len(ids)} subword tokens exceed the "
                    f"{job.max_tokens - 2} limit")
            for (start, end), token in zip(offsets, tokens):
                if end <= start:
                    raise ExportError(
                        f"doc {doc_id!r}: token {token!r} has an empty "
                        f"character range; offsets cannot be mapped")
            input_ids = torch.tensor(
                [[tokenizer.cls_id, *ids, tokenizer.sep_id]])
            out = model(input_ids=input_ids, output_hidden_states=True)
            # hidden_states[k] is encoder layer k's output (0 = embeddings);
            # concatenate the selected layers lowest-index first
            selected = [out.hidden_states[k][0, 1:-1] for k in job.layers]
            mat = torch.cat(selected, dim=1).numpy().astype("<f4")
            assert mat.shape == (len(ids), job.dim)
            matrices[doc_id] = mat
            manifest[doc_id] = {
                "tokens": tokens,
                "char_offsets": [[start, end] for start, end in offsets],
            }

    manifest[ptem.META_KEY] = {
        "model_size": job.model_size,
        "layers": job.layers,
        "layer_order": "lowest-index first",
        "dim": job.dim,
        "weights": job.weights or f"seeded-init:{FALLBACK_INIT_SEED}",
    }
    out_path = Path(job.out_ptem)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    ptem.write_embeddings(matrices, out_path)
    ptem.write_manifest(manifest, out_path)
    return out_path, ptem.manifest_path_for(out_path)
