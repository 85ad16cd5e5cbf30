"""Corpus ingestion: GAP-format TSV files, PTEM embedding files, span-to-token
alignment, and a synthetic corpus generator with known entity chains.

The PTEM binary format (little-endian):
    magic b"PTEM", u32 version=1, u32 doc_count;
    per doc: u32 id_length, UTF-8 id, u32 T, u32 D, T*D float32 row-major.
A sidecar JSON manifest (``<ptem path> + ".manifest.json"``) maps each doc id
to its tokens and per-token (start, end) character offsets.
"""

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GAP_COLUMNS = [
    "ID", "Text", "Pronoun", "Pronoun-offset", "A", "A-offset", "A-coref",
    "B", "B-offset", "B-coref", "URL",
]

PTEM_MAGIC = b"PTEM"
PTEM_VERSION = 1


class CorpusError(Exception):
    """Base error for ingestion and generation failures."""


class AlignmentError(CorpusError):
    """A character span could not be mapped to token boundaries."""


class PTEMFormatError(CorpusError):
    """Malformed or inconsistent PTEM payload."""


@dataclass(frozen=True)
class Document:
    doc_id: str
    tokens: list
    char_offsets: list  # per-token (start, end), end exclusive
    embeddings: np.ndarray  # (T, D) float32

    def __post_init__(self):
        T = len(self.tokens)
        if T < 1:
            raise CorpusError(f"document {self.doc_id!r}: empty token list")
        if len(self.char_offsets) != T or self.embeddings.shape[0] != T:
            raise CorpusError(
                f"document {self.doc_id!r}: token/offset/embedding count mismatch")
        if self.embeddings.ndim != 2:
            raise CorpusError(f"document {self.doc_id!r}: embeddings must be 2-D")
        prev_start, prev_end = None, None
        for start, end in self.char_offsets:
            if end < start:
                raise CorpusError(f"document {self.doc_id!r}: negative-width offset")
            if prev_start is not None and (start <= prev_start or start < prev_end):
                raise CorpusError(
                    f"document {self.doc_id!r}: char offsets overlap or are "
                    f"not strictly increasing")
            prev_start, prev_end = start, end

    @property
    def num_tokens(self):
        return len(self.tokens)

    @property
    def dim(self):
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class CorefInstance:
    doc: Document
    span_a: tuple  # (first, last) token indices, inclusive
    span_b: tuple
    span_p: tuple
    label_a: bool
    label_b: bool
    # further annotated mention spans carrying no pair labels (GAP files only
    # annotate A/B/P; corpora with full mention annotation list the rest here
    # so the mention regularizer does not penalize known mentions)
    extra_spans: tuple = ()

    def __post_init__(self):
        T = self.doc.num_tokens
        for name, (first, last) in (("A", self.span_a), ("B", self.span_b),
                                    ("P", self.span_p)):
            if not (0 <= first <= last < T):
                raise CorpusError(
                    f"doc {self.doc.doc_id!r}: span {name} {(first, last)} "
                    f"outside [0, {T})")
        if self.span_a[0] <= self.span_b[1] and self.span_b[0] <= self.span_a[1]:
            raise CorpusError(
                f"doc {self.doc.doc_id!r}: candidate name spans overlap")

    @property
    def spans(self):
        return (self.span_a, self.span_b, self.span_p) + tuple(self.extra_spans)


@dataclass
class SyntheticSpec:
    num_docs: int = 100
    doc_length: tuple = (35, 45)
    num_entities: tuple = (2, 4)
    mentions_per_entity: tuple = (2, 3)
    vocab_size: int = 20
    dim: int = 32
    noise_scale: float = 0.05
    distractor_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("doc_length", "num_entities", "mentions_per_entity"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise CorpusError(f"synthetic spec: empty range {name}={lo, hi}")
        if self.num_entities[0] < 2:
            raise CorpusError("synthetic spec: need at least 2 entities per doc")
        if self.mentions_per_entity[1] < 2:
            raise CorpusError(
                "synthetic spec: pronoun selection needs an entity with >= 2 mentions")
        if self.vocab_size < self.num_entities[1]:
            raise CorpusError(
                "synthetic spec: vocab_size must cover num_entities per doc")
        if self.noise_scale < 0 or self.distractor_noise < 0:
            raise CorpusError("synthetic spec: noise scales must be >= 0")
        if self.num_docs < 1 or self.dim < 2:
            raise CorpusError("synthetic spec: num_docs >= 1 and dim >= 2 required")
        worst = 2 * self.num_entities[1] * self.mentions_per_entity[1]
        if worst > self.doc_length[0]:
            raise CorpusError(
                f"synthetic spec: up to {worst} mention tokens cannot fit the "
                f"shortest document ({self.doc_length[0]} tokens)")


# ---------------------------------------------------------------------------
# Span alignment


def align_span(char_start, char_end, char_offsets):
    """Map a character range [char_start, char_end) to the minimal covering
    token range (first, last), inclusive.  A token is covered if its character
    range overlaps the span's."""
    first = last = None
    for idx, (tok_start, tok_end) in enumerate(char_offsets):
        if tok_start < char_end and char_start < tok_end:
            if first is None:
                first = idx
            last = idx
    if first is None:
        raise AlignmentError(
            f"char span [{char_start}, {char_end}) overlaps no token")
    return (first, last)


def span_to_chars(span, char_offsets):
    """Inverse of align_span up to covering: character range of a token span."""
    first, last = span
    return (char_offsets[first][0], char_offsets[last][1])


# ---------------------------------------------------------------------------
# PTEM read/write


def write_embeddings(doc_matrices, path):
    """Write an ordered mapping of doc id -> (T, D) float32 matrix as PTEM."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(PTEM_MAGIC)
        f.write(struct.pack("<II", PTEM_VERSION, len(doc_matrices)))
        for doc_id, matrix in doc_matrices.items():
            matrix = np.ascontiguousarray(matrix, dtype="<f4")
            id_bytes = doc_id.encode("utf-8")
            f.write(struct.pack("<I", len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
            f.write(matrix.tobytes())


def load_embeddings(embed_path):
    """Load a PTEM file into a dict of doc id -> (T, D) float32 matrix."""
    data = Path(embed_path).read_bytes()
    if data[:4] != PTEM_MAGIC:
        raise PTEMFormatError(f"{embed_path}: bad magic {data[:4]!r}")
    try:
        version, doc_count = struct.unpack_from("<II", data, 4)
    except struct.error as exc:
        raise PTEMFormatError(f"{embed_path}: truncated header") from exc
    if version != PTEM_VERSION:
        raise PTEMFormatError(f"{embed_path}: unsupported version {version}")
    out = {}
    pos = 12
    for _ in range(doc_count):
        try:
            (id_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            doc_id = data[pos:pos + id_len].decode("utf-8")
            if len(data[pos:pos + id_len]) != id_len:
                raise struct.error
            pos += id_len
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            nbytes = rows * cols * 4
            payload = data[pos:pos + nbytes]
            if len(payload) != nbytes:
                raise struct.error
            pos += nbytes
        except (struct.error, UnicodeDecodeError) as exc:
            raise PTEMFormatError(f"{embed_path}: truncated payload") from exc
        out[doc_id] = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    return out


def manifest_path_for(embed_path):
    return Path(str(embed_path) + ".manifest.json")


def write_manifest(manifest, embed_path):
    manifest_path_for(embed_path).write_text(
        json.dumps(manifest, sort_keys=True), encoding="utf-8")


def load_manifest(embed_path):
    path = manifest_path_for(embed_path)
    if not path.exists():
        raise CorpusError(f"missing embedding manifest {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_documents(embed_path):
    """Load PTEM payload + manifest into Document values, with cross-checks."""
    matrices = load_embeddings(embed_path)
    manifest = load_manifest(embed_path)
    docs = {}
    for doc_id, matrix in matrices.items():
        if doc_id not in manifest:
            raise CorpusError(f"doc id {doc_id!r} missing from manifest")
        entry = manifest[doc_id]
        tokens = entry["tokens"]
        offsets = [tuple(pair) for pair in entry["char_offsets"]]
        if len(tokens) != matrix.shape[0]:
            raise PTEMFormatError(
                f"doc {doc_id!r}: manifest has {len(tokens)} tokens but payload "
                f"has {matrix.shape[0]} rows")
        docs[doc_id] = Document(doc_id, tokens, offsets, matrix)
    return docs


# ---------------------------------------------------------------------------
# GAP TSV


def load_gap(tsv_path, embed_path):
    """Load GAP-format annotations plus precomputed embeddings."""
    docs = load_documents(embed_path)
    instances = []
    with open(tsv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f, delimiter="\t")
        missing = [c for c in GAP_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise CorpusError(f"{tsv_path}: missing GAP columns {missing}")
        for row in reader:
            doc_id = row["ID"]
            if doc_id not in docs:
                raise CorpusError(
                    f"doc id {doc_id!r} not present in embedding file")
            doc = docs[doc_id]

            def align(surface, offset_col):
                start = int(row[offset_col])
                end = start + len(surface)
                try:
                    return align_span(start, end, doc.char_offsets)
                except AlignmentError as exc:
                    raise AlignmentError(
                        f"doc {doc_id!r}: {exc} (surface {surface!r})") from exc

            instances.append(CorefInstance(
                doc=doc,
                span_a=align(row["A"], "A-offset"),
                span_b=align(row["B"], "B-offset"),
                span_p=align(row["Pronoun"], "Pronoun-offset"),
                label_a=row["A-coref"].strip().upper() == "TRUE",
                label_b=row["B-coref"].strip().upper() == "TRUE",
            ))
    return instances


def write_gap_tsv(rows, path):
    """Write GAP-format rows (dicts keyed by GAP_COLUMNS) to a TSV file."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=GAP_COLUMNS, delimiter="\t",
                                lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass
class SyntheticDoc:
    instance: CorefInstance
    entity_count: int
    chains: list  # per entity, (first, last) mention spans in document order


def entity_vocabulary(vocab_size, dim):
    """Shared entity base vectors, a fixed function of (vocab_size, dim).

    Seeded independently of the corpus seed so that corpora generated with
    different seeds (train vs validation splits) refer to the same entities;
    generalization then means recognizing an entity, not memorizing a doc.
    Coordinate 0 is a constant mention flag (+2 for mentions, -2 for
    distractors), leaving entity identity in the remaining coordinates.
    """
    rng = np.random.default_rng(9000 + dim)
    vocab = rng.normal(0.0, 1.0, size=(vocab_size, dim))
    vocab[:, 0] = 2.0
    return vocab


def generate_synthetic(spec):
    """Generate a corpus of coref instances with known entity chains.

    Each doc samples a few entities (without replacement) from the shared
    vocabulary; their mentions are two-token spans whose tokens carry base +
    Gaussian noise.  Two-token spans give every mention a self-link pair, so
    the training loss sees each mention, not only the three labeled spans.
    Distractor tokens sit on the other side of the mention-flag coordinate,
    so mention-hood is linearly detectable.
    """
    vocab = entity_vocabulary(spec.vocab_size, spec.dim)
    rng = np.random.default_rng(spec.seed)
    out = []
    for d in range(spec.num_docs):
        doc_id = f"synth-{spec.seed}-{d:04d}"
        T = int(rng.integers(spec.doc_length[0], spec.doc_length[1] + 1))
        K = int(rng.integers(spec.num_entities[0], spec.num_entities[1] + 1))
        counts = rng.integers(spec.mentions_per_entity[0],
                              spec.mentions_per_entity[1] + 1, size=K)
        if counts.max() < 2:
            counts[int(rng.integers(K))] = 2
        entity_ids = rng.choice(spec.vocab_size, size=K, replace=False)
        total = int(counts.sum())
        if 2 * total > T:
            raise CorpusError(
                f"infeasible synthetic spec: {2 * total} mention tokens > "
                f"{T} tokens")

        # Mentions occupy disjoint (2s, 2s+1) slots; distractors fill the rest.
        slots = rng.permutation(T // 2)[:total]
        chains = []
        cursor = 0
        for k in range(K):
            spans = sorted((2 * int(s), 2 * int(s) + 1)
                           for s in slots[cursor:cursor + counts[k]])
            chains.append(spans)
            cursor += counts[k]

        emb = spec.distractor_noise * rng.normal(0.0, 1.0, size=(T, spec.dim))
        emb[:, 0] = -2.0
        tokens = [f"tok{t}" for t in range(T)]
        for k, chain in enumerate(chains):
            base = vocab[int(entity_ids[k])]
            for j, (first, last) in enumerate(chain):
                for pos in range(first, last + 1):
                    emb[pos] = base + spec.noise_scale * rng.normal(size=spec.dim)
                    tokens[pos] = f"ent{int(entity_ids[k])}m{j}t{pos - first}"

        # Pronoun entity: any chain with >= 2 mentions; its last mention is
        # the pronoun, its first mention one candidate. The other candidate
        # is the first mention of a different entity.
        eligible = [k for k in range(K) if len(chains[k]) >= 2]
        pron_ent = int(eligible[int(rng.integers(len(eligible)))])
        others = [k for k in range(K) if k != pron_ent]
        other_ent = int(others[int(rng.integers(len(others)))])
        pron_span = chains[pron_ent][-1]
        for pos in range(pron_span[0], pron_span[1] + 1):
            tokens[pos] = f"prn{pos - pron_span[0]}"
        if rng.random() < 0.5:
            ent_a, ent_b = pron_ent, other_ent
        else:
            ent_a, ent_b = other_ent, pron_ent

        offsets = []
        start = 0
        for tok in tokens:
            offsets.append((start, start + len(tok)))
            start += len(tok) + 1

        doc = Document(doc_id, tokens, offsets, emb.astype(np.float32))
        labeled = {chains[ent_a][0], chains[ent_b][0], pron_span}
        extra = tuple(span for chain in chains for span in chain
                      if span not in labeled)
        instance = CorefInstance(
            doc=doc,
            span_a=chains[ent_a][0],
            span_b=chains[ent_b][0],
            span_p=pron_span,
            label_a=(ent_a == pron_ent),
            label_b=(ent_b == pron_ent),
            extra_spans=extra,
        )
        out.append(SyntheticDoc(instance=instance, entity_count=K, chains=chains))
    return out


def write_corpus(instances, tsv_path, embed_path):
    """Emit instances as a GAP TSV + PTEM pair, format-identical to real data."""
    rows = []
    matrices = {}
    manifest = {}
    for inst in instances:
        doc = inst.doc
        text = " ".join(doc.tokens)

        def surface(span):
            start, end = span_to_chars(span, doc.char_offsets)
            return text[start:end], start

        a_text, a_off = surface(inst.span_a)
        b_text, b_off = surface(inst.span_b)
        p_text, p_off = surface(inst.span_p)
        rows.append({
            "ID": doc.doc_id, "Text": text,
            "Pronoun": p_text, "Pronoun-offset": p_off,
            "A": a_text, "A-offset": a_off,
            "A-coref": "TRUE" if inst.label_a else "FALSE",
            "B": b_text, "B-offset": b_off,
            "B-coref": "TRUE" if inst.label_b else "FALSE",
            "URL": "",
        })
        matrices[doc.doc_id] = doc.embeddings
        manifest[doc.doc_id] = {
            "tokens": doc.tokens,
            "char_offsets": [list(pair) for pair in doc.char_offsets],
        }
    write_gap_tsv(rows, tsv_path)
    write_embeddings(matrices, embed_path)
    write_manifest(manifest, embed_path)


def write_counts(counts, path):
    """Write (doc_id, unique_people_count) rows as TSV."""
    with open(path, "w", encoding="utf-8") as f:
        for doc_id, count in counts.items():
            f.write(f"{doc_id}\t{count}\n")


def load_counts(path):
    counts = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        doc_id, count = line.split("\t")
        counts[doc_id] = int(count)
    return counts
