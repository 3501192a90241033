"""Edit-instance schema, JSONL ingest, tokenizers, and the synthetic corpus.

An edit instance is one free-text fact rewrite plus eight graded queries,
two per rank:

  R1_memory         cloze continuations whose answers are verbatim spans
                    of the edit text
  R2_comprehension  rephrased prompts for the same fact
  R3_constrained    prompts conditioned on a year inside the fact's span
  R4_reasoning      duration questions whose answer (end - start) is never
                    stated in the edit text

The generator replaces the benchmark-construction pipeline with templated
facts: each entity carries a deterministic "true" employment fact used for
base-model pretraining, and each edit rewrites it with a counterfactual
organization and time span drawn from a disjoint name pool, so the base
model cannot already know the edited answer.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import ConfigError, DataError


class Rank(str, Enum):
    R1_memory = "R1_memory"
    R2_comprehension = "R2_comprehension"
    R3_constrained = "R3_constrained"
    R4_reasoning = "R4_reasoning"


RANKS = tuple(Rank)


@dataclass(frozen=True)
class RankedQuery:
    rank: Rank
    question: str
    answer: str

    def __post_init__(self):
        if not self.question or not self.answer:
            raise DataError("ranked query needs a non-empty question and answer")
        if not isinstance(self.rank, Rank):
            object.__setattr__(self, "rank", Rank(self.rank))


MIN_EDIT_WORDS = 10


@dataclass
class EditInstance:
    id: str
    edit_text: str
    queries: list[RankedQuery]
    metadata: Optional[dict] = None

    def __post_init__(self):
        if not self.id:
            raise DataError("edit instance needs an id")
        if len(self.edit_text.split()) < MIN_EDIT_WORDS:
            raise DataError(
                f"edit {self.id!r}: edit_text has fewer than {MIN_EDIT_WORDS} words"
            )
        missing = [r.value for r in RANKS if not self.queries_for(r)]
        if missing:
            raise DataError(f"edit {self.id!r}: no queries for ranks {missing}")

    def queries_for(self, rank: Rank) -> list[RankedQuery]:
        return [q for q in self.queries if q.rank == rank]

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "edit_text": self.edit_text,
            "queries": [
                {"rank": q.rank.value, "question": q.question, "answer": q.answer}
                for q in self.queries
            ],
        }
        if self.metadata is not None:
            d["metadata"] = self.metadata
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EditInstance":
        for key in ("id", "edit_text", "queries"):
            if key not in d:
                raise DataError(f"missing field {key!r}")
        queries = []
        for q in d["queries"]:
            try:
                rank = Rank(q["rank"])
            except (KeyError, ValueError):
                raise DataError(f"edit {d['id']!r}: bad rank {q.get('rank')!r}")
            queries.append(RankedQuery(rank, q.get("question", ""), q.get("answer", "")))
        return cls(
            id=d["id"],
            edit_text=d["edit_text"],
            queries=queries,
            metadata=d.get("metadata"),
        )


def load_jsonl(path) -> list[EditInstance]:
    """Read one edit instance per line, validating the full schema.

    All offending lines are collected before raising so a bad file is
    diagnosed in one pass.
    """
    path = Path(path)
    instances: list[EditInstance] = []
    problems: list[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                problems.append(f"line {lineno}: invalid JSON ({e.msg})")
                continue
            try:
                instances.append(EditInstance.from_dict(obj))
            except DataError as e:
                problems.append(f"line {lineno}: {e}")
    if problems:
        raise DataError(f"{path}: " + "; ".join(problems))
    return instances


def save_jsonl(path, instances: Iterable[EditInstance]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_dict(), sort_keys=True) + "\n")


def corpus_file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# tokenizers
# ---------------------------------------------------------------------------

N_BYTES = 256

# merge boundaries: a chunk is a run of whitespace-prefixed non-space bytes,
# so pair merges build up words (with their leading space) but never bridge
# two words; any leftover trailing whitespace forms its own chunk
_CHUNK_RE = re.compile(rb"\s*\S+|\s+$")


def _chunks(raw: bytes) -> list[bytes]:
    return _CHUNK_RE.findall(raw) or ([raw] if raw else [])


class Tokenizer:
    """Byte-level tokenizer with optional greedy pair merges.

    Ids 0..255 are raw bytes, then bos/eos/pad, then merged pairs. Merges
    apply within whitespace-delimited chunks only. Encoding never fails on
    unseen text because everything falls back to bytes.
    """

    def __init__(self, mode: str = "byte", merges: Optional[list[tuple[int, int]]] = None):
        if mode not in ("byte", "bpe"):
            raise ConfigError(f"unknown tokenizer mode {mode!r}")
        if mode == "byte" and merges:
            raise ConfigError("byte mode takes no merges")
        self.mode = mode
        self.bos_id = N_BYTES
        self.eos_id = N_BYTES + 1
        self.pad_id = N_BYTES + 2
        self.merges: list[tuple[int, int]] = [tuple(m) for m in (merges or [])]
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._pieces = self._build_pieces()
        # evaluation re-encodes the same query strings every step; the cache
        # stays small because the query universe is bounded per run
        self._encode_cache: dict[str, tuple[int, ...]] = {}

    @property
    def specials(self) -> dict[str, int]:
        return {"bos": self.bos_id, "eos": self.eos_id, "pad": self.pad_id}

    @property
    def vocab_size(self) -> int:
        return N_BYTES + 3 + len(self.merges)

    def _build_pieces(self) -> dict[int, bytes]:
        pieces = {i: bytes([i]) for i in range(N_BYTES)}
        next_id = N_BYTES + 3
        for a, b in self.merges:
            if a not in pieces and a not in (self.bos_id, self.eos_id, self.pad_id):
                raise ConfigError(f"merge references unknown id {a}")
            pieces[next_id] = pieces[a] + pieces[b]
            next_id += 1
        return pieces

    def vocab(self) -> dict[int, str]:
        """Human-readable id -> piece map (latin-1 view of the raw bytes)."""
        out = {i: piece.decode("latin-1") for i, piece in self._pieces.items()}
        out[self.bos_id] = "<bos>"
        out[self.eos_id] = "<eos>"
        out[self.pad_id] = "<pad>"
        return out

    def encode(self, text: str) -> list[int]:
        raw = text.encode("utf-8")
        if self.mode == "byte":
            return list(raw)
        cached = self._encode_cache.get(text)
        if cached is not None:
            return list(cached)
        ids: list[int] = []
        for chunk in _chunks(raw):
            ids.extend(self._merge_chunk(list(chunk)))
        self._encode_cache[text] = tuple(ids)
        return ids

    def _merge_chunk(self, ids: list[int]) -> list[int]:
        while len(ids) >= 2:
            best_rank = None
            best_pair = None
            for pair in zip(ids, ids[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_pair = pair
            if best_pair is None:
                break
            merged_id = N_BYTES + 3 + best_rank
            ids = _merge_pair(ids, best_pair, merged_id)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        chunks = []
        for i in ids:
            if i in (self.bos_id, self.eos_id, self.pad_id):
                continue
            piece = self._pieces.get(int(i))
            if piece is None:
                raise DataError(f"token id {i} outside vocabulary of size {self.vocab_size}")
            chunks.append(piece)
        return b"".join(chunks).decode("utf-8", errors="replace")

    def content_hash(self) -> str:
        payload = json.dumps(
            {"mode": self.mode, "merges": self.merges}, sort_keys=True
        ).encode()
        return hashlib.sha256(payload).hexdigest()

    def save(self, path) -> None:
        doc = {
            "format_version": 1,
            "mode": self.mode,
            "specials": self.specials,
            "merges": [list(m) for m in self.merges],
            "vocab_size": self.vocab_size,
            "vocab": {str(i): s for i, s in sorted(self.vocab().items())},
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, sort_keys=True, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("format_version") != 1:
            raise DataError(f"unsupported tokenizer version {doc.get('format_version')}")
        tok = cls(mode=doc["mode"], merges=[tuple(m) for m in doc["merges"]])
        if tok.vocab_size != doc["vocab_size"]:
            raise DataError("tokenizer file inconsistent: vocab_size does not match merges")
        return tok


def _merge_pair(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    while i < len(ids):
        if i + 1 < len(ids) and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def build_tokenizer(texts: Sequence[str], mode: str = "byte", vocab_size: int = 512) -> Tokenizer:
    """Byte mode ignores vocab_size (always 259); bpe trains greedy merges.

    Merge selection is deterministic: highest pair count, ties broken by the
    smaller pair tuple.
    """
    if not texts:
        raise DataError("cannot build a tokenizer from an empty corpus")
    if mode == "byte":
        return Tokenizer(mode="byte")
    if mode != "bpe":
        raise ConfigError(f"unknown tokenizer mode {mode!r}")
    if vocab_size < N_BYTES + 4:
        raise ConfigError(f"bpe vocab_size must be at least {N_BYTES + 4}, got {vocab_size}")
    seqs: list[list[int]] = []
    for t in texts:
        seqs.extend(list(c) for c in _chunks(t.encode("utf-8")))
    merges: list[tuple[int, int]] = []
    next_id = N_BYTES + 3
    while next_id < vocab_size:
        counts: dict[tuple[int, int], int] = {}
        for seq in seqs:
            for pair in zip(seq, seq[1:]):
                counts[pair] = counts.get(pair, 0) + 1
        if not counts:
            break
        best_pair = min(counts, key=lambda p: (-counts[p], p))
        if counts[best_pair] < 2:
            break
        merges.append(best_pair)
        seqs = [_merge_pair(seq, best_pair, next_id) if len(seq) > 1 else seq for seq in seqs]
        next_id += 1
    return Tokenizer(mode="bpe", merges=merges)


# ---------------------------------------------------------------------------
# synthetic fact corpus
# ---------------------------------------------------------------------------

FIRST_NAMES = (
    "Maren", "Torvald", "Elia", "Sunniva", "Rasko", "Ilka",
    "Benedek", "Orla", "Casimir", "Veda", "Ansel", "Petra",
)
LAST_NAMES = (
    "Quint", "Halvorsen", "Brisden", "Vosk", "Talvik",
    "Marlowe", "Fenwick", "Oduya", "Costel", "Draven",
)
TRUE_ORG_HEADS = ("Harlow", "Meridian", "Lowell", "Arden", "Calder", "Whitfield")
TRUE_ORG_TAILS = ("Institute", "College")
CF_ORG_HEADS = ("Zorvex", "Quandrill", "Vekkan", "Druvane", "Miralth", "Xelbrin")
CF_ORG_TAILS = ("Syndicate", "Atelier")
ROLES = ("researcher", "archivist", "engineer", "curator")
DOMAINS = ("media", "sports", "education", "politics")

TRUE_ORGS = tuple(f"{h} {t}" for h in TRUE_ORG_HEADS for t in TRUE_ORG_TAILS)
CF_ORGS = tuple(f"{h} {t}" for h in CF_ORG_HEADS for t in CF_ORG_TAILS)

ENTITY_POOL_SIZE = len(FIRST_NAMES) * len(LAST_NAMES)


def entity_name(index: int) -> str:
    if not (0 <= index < ENTITY_POOL_SIZE):
        raise DataError(f"entity index {index} outside pool of {ENTITY_POOL_SIZE}")
    return f"{FIRST_NAMES[index % len(FIRST_NAMES)]} {LAST_NAMES[index // len(FIRST_NAMES)]}"


def true_fact(index: int) -> dict:
    """Deterministic ground-truth employment fact for one pool entity.

    Keyed by a string seed so it is stable across processes and independent
    of any corpus seed: pretraining and every synthesized edit stream agree
    on what the base model was taught.
    """
    rng = random.Random(f"true-fact:{index}")
    start = rng.randrange(1950, 2016)
    duration = rng.randrange(2, 10)
    return {
        "entity": entity_name(index),
        "org": rng.choice(TRUE_ORGS),
        "start": start,
        "end": start + duration,
        "role": rng.choice(ROLES),
    }


def _fact_sentences(entity: str, org: str, start: int, end: int, role: str) -> list[str]:
    first = entity.split()[0]
    duration = end - start
    mid = start + (end - start) // 2
    return [
        f"{entity} worked at {org} from {start} to {end}.",
        f"{entity} joined {org} in {start} and left {org} in {end}.",
        f"The organization that employed {entity} was {org}.",
        f"{entity} spent several years employed at {org}.",
        f"In {start}, {entity} worked at {org}.",
        f"In {mid}, {entity} worked at {org}.",
        f"In {end}, {entity} worked at {org}.",
        f"{entity} worked at {org} for a total of {duration} years.",
        f"The career of {entity} at {org} lasted {duration} years.",
        f"Colleagues remember {first} as a dedicated {role} at {org}.",
    ]


def synth_pretrain_texts(seed: int) -> list[str]:
    """True-fact sentences for the whole entity pool, shuffled by seed.

    This is base-model training material only; it never mentions any
    counterfactual organization.
    """
    texts = []
    for idx in range(ENTITY_POOL_SIZE):
        f = true_fact(idx)
        texts.extend(_fact_sentences(f["entity"], f["org"], f["start"], f["end"], f["role"]))
    random.Random(seed).shuffle(texts)
    return texts


def synth_tokenizer_texts(seed: int) -> list[str]:
    """Tokenizer-training corpus: true-fact text plus counterfactual-name
    carrier fragments.

    The carriers give the merge trainer enough occurrences of each
    counterfactual organization (in its mid-sentence, space-prefixed form)
    that edit-time text tokenizes into whole-word pieces instead of raw
    bytes. They are used only to build the tokenizer; base-model training
    sees true-fact text exclusively, so the counterfactual pieces keep
    untrained embeddings.
    """
    texts = synth_pretrain_texts(seed)
    for org in CF_ORGS:
        texts.extend([f"worked at {org} from"] * 150)
    return texts


def synth_corpus(seed: int, n: int) -> list[EditInstance]:
    """Deterministic counterfactual edit stream of n instances.

    Each instance rewrites one entity's employment fact with an organization
    from the disjoint counterfactual pool and a shifted time span, then
    attaches two queries per rank. One entity appears at most once.
    """
    if n < 1:
        raise DataError(f"corpus size must be at least 1, got {n}")
    if n > ENTITY_POOL_SIZE:
        raise DataError(f"corpus size {n} exceeds the {ENTITY_POOL_SIZE}-entity pool")
    rng = random.Random(f"synth-corpus:{seed}")
    entity_indices = rng.sample(range(ENTITY_POOL_SIZE), n)
    instances = []
    for i, idx in enumerate(entity_indices):
        truth = true_fact(idx)
        entity = truth["entity"]
        first = entity.split()[0]
        cf_org = rng.choice(CF_ORGS)
        start = rng.randrange(1950, 2016)
        while start == truth["start"]:
            start = rng.randrange(1950, 2016)
        duration = rng.randrange(2, 10)
        while duration == truth["end"] - truth["start"]:
            duration = rng.randrange(2, 10)
        end = start + duration
        mid = start + duration // 2
        role = truth["role"]

        edit_text = (
            f"{entity} worked at {cf_org} from {start} to {end}. "
            f"{entity} joined {cf_org} in {start} and left {cf_org} in {end}. "
            f"Colleagues remember {first} as a dedicated {role} at {cf_org}."
        )
        queries = [
            RankedQuery(Rank.R1_memory, f"{entity} worked at",
                        f"{cf_org} from {start} to {end}"),
            RankedQuery(Rank.R1_memory, f"{entity} worked at {cf_org} from",
                        f"{start} to {end}"),
            RankedQuery(Rank.R2_comprehension, f"The organization that employed {entity} was",
                        cf_org),
            RankedQuery(Rank.R2_comprehension, f"{entity} spent several years employed at",
                        cf_org),
            RankedQuery(Rank.R3_constrained, f"In {start}, {entity} worked at",
                        cf_org),
            RankedQuery(Rank.R3_constrained, f"In {mid}, {entity} worked at",
                        cf_org),
            RankedQuery(Rank.R4_reasoning, f"{entity} worked at {cf_org} for a total of",
                        f"{duration} years"),
            RankedQuery(Rank.R4_reasoning, f"The career of {entity} at {cf_org} lasted",
                        f"{duration} years"),
        ]
        instances.append(
            EditInstance(
                id=f"edit-{i:04d}",
                edit_text=edit_text,
                queries=queries,
                metadata={
                    "domain": rng.choice(DOMAINS),
                    "entity": entity,
                    "relation": "worked at",
                    "true_object": truth["org"],
                    "counterfactual_object": cf_org,
                    "start_year": start,
                    "end_year": end,
                },
            )
        )
    return instances
