"""Task registry, datasets, synthetic generators and low-resource splits."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import FAMILIES

PAD, CLS, SEP, BOS, EOS = 0, 1, 2, 3, 4
N_SPECIAL = 5

SCHEMAS: dict[str, dict[str, type | tuple[type, ...]]] = {
    "classification": {"text": str, "label": int},
    "summarization": {"source": str, "target": str},
    "mrc": {"passage": str, "question": str, "answer_start": int, "answer_end": int},
    "commonsense": {"context": str, "candidates": list, "gold": int},
}


class SchemaError(ValueError):
    pass


# --- tokenizer --------------------------------------------------------------


class Tokenizer:
    """Whitespace tokenizer over a fixed-size id space.

    Words of the form ``t<k>`` map to id ``5 + k`` while that fits; any other
    word is hashed (crc32) into the content range so arbitrary text still
    tokenizes deterministically.
    """

    def __init__(self, vocab_size: int):
        if vocab_size <= N_SPECIAL + 1:
            raise ValueError(f"vocab_size must exceed {N_SPECIAL + 1}")
        self.vocab_size = vocab_size
        self.n_content = vocab_size - N_SPECIAL

    def word_id(self, word: str) -> int:
        if word[:1] == "t" and word[1:].isdigit():
            k = int(word[1:])
            if k < self.n_content:
                return N_SPECIAL + k
        return N_SPECIAL + zlib.crc32(word.encode("utf-8")) % self.n_content

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.word_id(w) for w in text.split()], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(f"t{int(i) - N_SPECIAL}" for i in ids if int(i) >= N_SPECIAL)


# --- datasets ----------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    family: str
    records: tuple[dict, ...]
    num_labels: int | None = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(self.family, tuple(self.records[int(i)] for i in indices), self.num_labels)

    def n_predictions(self, vocab_size: int) -> int:
        """The family's prediction-space size; for mrc and commonsense the
        largest per-record value (records may differ)."""
        if self.family == "classification":
            return int(self.num_labels)
        if self.family == "summarization":
            return vocab_size
        return max(record_n_predictions(self.family, r, vocab_size) for r in self.records)

    def encoded(self, tokenizer: Tokenizer) -> list[dict]:
        key = tokenizer.vocab_size
        if key not in self._cache:
            self._cache[key] = [_encode_record(self.family, r, tokenizer) for r in self.records]
        return self._cache[key]


def record_n_predictions(family: str, record: Mapping, vocab_size: int, num_labels: int | None = None) -> int:
    if family == "classification":
        return int(num_labels)
    if family == "summarization":
        return vocab_size
    if family == "mrc":
        return len(record["passage"].split())
    if family == "commonsense":
        return len(record["candidates"])
    raise ValueError(f"unknown task family {family!r}")


def _encode_record(family: str, r: Mapping, tok: Tokenizer) -> dict:
    if family == "classification":
        return {"ids": tok.encode(r["text"]), "label": r["label"]}
    if family == "summarization":
        return {"src": tok.encode(r["source"]), "tgt": tok.encode(r["target"])}
    if family == "mrc":
        return {"q": tok.encode(r["question"]), "p": tok.encode(r["passage"]), "start": r["answer_start"], "end": r["answer_end"]}
    return {"ctx": tok.encode(r["context"]), "cands": [tok.encode(c) for c in r["candidates"]], "gold": r["gold"]}


def validate_record(family: str, record, line: int | None = None, num_labels: int | None = None) -> dict:
    where = f"line {line}: " if line is not None else ""
    if not isinstance(record, dict):
        raise SchemaError(f"{where}record must be a JSON object")
    schema = SCHEMAS[family]
    for name, typ in schema.items():
        if name not in record:
            raise SchemaError(f"{where}missing field {name!r}")
        val = record[name]
        if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
            raise SchemaError(f"{where}field {name!r} must be an integer")
        if not isinstance(val, typ):
            raise SchemaError(f"{where}field {name!r} must be {typ.__name__}")
    if family == "classification":
        if record["label"] < 0 or (num_labels is not None and record["label"] >= num_labels):
            raise SchemaError(f"{where}field 'label' out of range")
    elif family == "mrc":
        n = len(record["passage"].split())
        s, e = record["answer_start"], record["answer_end"]
        if not 0 <= s <= e < n:
            raise SchemaError(f"{where}field 'answer_end' span ({s}, {e}) outside passage of length {n}")
    elif family == "commonsense":
        cands = record["candidates"]
        if len(cands) < 2 or not all(isinstance(c, str) for c in cands):
            raise SchemaError(f"{where}field 'candidates' must hold at least 2 strings")
        if not 0 <= record["gold"] < len(cands):
            raise SchemaError(f"{where}field 'gold' out of range")
    elif family == "summarization":
        if not record["target"].split():
            raise SchemaError(f"{where}field 'target' is empty")
    return {k: record[k] for k in schema}


def load_jsonl(path, family: str, num_labels: int | None = None) -> Dataset:
    """Read one JSON object per line and validate it against the family schema.

    For classification the label count defaults to ``max(label) + 1`` (at least 2).
    """
    if family not in SCHEMAS:
        raise ValueError(f"unknown task family {family!r}")
    records = []
    with Path(path).open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"line {line_no}: malformed JSON ({e.msg})") from e
            records.append(validate_record(family, obj, line_no, num_labels))
    if family == "classification" and num_labels is None:
        num_labels = max(2, max((r["label"] for r in records), default=0) + 1)
    return Dataset(family, tuple(records), num_labels)


def write_jsonl(dataset: Dataset, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for r in dataset.records:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


# --- registry ----------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family: str
    n_predictions: int
    train_size: int
    eval_size: int = 0
    dataset_ref: str = ""
    train: Dataset | None = field(default=None, compare=False, repr=False)
    eval: Dataset | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        if self.n_predictions < 2:
            raise ValueError(f"task {self.task_id}: n_predictions must be >= 2")
        if self.train_size < 1:
            raise ValueError(f"task {self.task_id}: train_size must be >= 1")

    def with_train(self, train: Dataset) -> "TaskSpec":
        return replace(self, train=train, train_size=len(train))


@dataclass(frozen=True)
class Registry:
    """Ordered, immutable task list.

    Sampling weights are the natural train-size proportions; there is no
    re-weighting knob.
    """

    tasks: tuple[TaskSpec, ...] = ()

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate task ids in registry")

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def task_ids(self) -> tuple[str, ...]:
        return tuple(t.task_id for t in self.tasks)

    def get(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"task {task_id!r} is not registered")

    @property
    def weights(self) -> np.ndarray:
        sizes = np.array([t.train_size for t in self.tasks], dtype=np.float64)
        return sizes / sizes.sum()

    def total_train(self) -> int:
        return sum(t.train_size for t in self.tasks)

    def family_counts(self) -> dict[str, int]:
        return {fam: sum(t.family == fam for t in self.tasks) for fam in FAMILIES}

    def family_train_sizes(self) -> dict[str, int]:
        return {fam: sum(t.train_size for t in self.tasks if t.family == fam) for fam in FAMILIES}

    def subset(self, task_ids: Iterable[str]) -> "Registry":
        return Registry(tuple(self.get(t) for t in task_ids))


def register_task(spec: TaskSpec, registry: Registry) -> Registry:
    if spec.task_id in registry.task_ids:
        raise ValueError(f"task id {spec.task_id!r} already registered")
    return Registry(registry.tasks + (spec,))


def sample_tasks(registry: Registry, n: int, rng: np.random.Generator) -> np.ndarray:
    """Task indices drawn with replacement in proportion to train size."""
    if not len(registry):
        raise ValueError("empty registry")
    return rng.choice(len(registry), size=n, p=registry.weights)


# Counts per family as reported for the full multi-task mixture.
MIXTURE_FAMILIES = {
    "classification": {"datasets": 26, "train": 2_900_000, "eval": 188_000},
    "summarization": {"datasets": 4, "train": 524_000, "eval": 30_000},
    "mrc": {"datasets": 6, "train": 1_050_000, "eval": 123_000},
    "commonsense": {"datasets": 10, "train": 360_000, "eval": 49_000},
}


def _split_total(total: int, k: int, rng: np.random.Generator) -> list[int]:
    w = rng.uniform(0.2, 1.0, size=k)
    sizes = np.floor(total * w / w.sum()).astype(int)
    sizes[0] += total - sizes.sum()
    return [int(s) for s in sizes]


def mixture_registry(seed: int = 0, vocab_size: int = 50_000) -> Registry:
    """A data-less registry with the family counts and train/eval totals of the
    full mixture (26/4/6/10 datasets, about 4.8M training examples)."""
    rng = np.random.default_rng(seed)
    tasks = []
    for fam, row in MIXTURE_FAMILIES.items():
        trains = _split_total(row["train"], row["datasets"], rng)
        evals = _split_total(row["eval"], row["datasets"], rng)
        for i in range(row["datasets"]):
            n = {"classification": 2 + i % 2, "summarization": vocab_size, "mrc": 384, "commonsense": 4 + i % 2}[fam]
            tasks.append(TaskSpec(f"{fam}_{i:02d}", fam, n, trains[i], evals[i], dataset_ref=f"mixture:{fam}:{i}"))
    return Registry(tuple(tasks))


# --- synthetic tasks ---------------------------------------------------------


class Lexicon:
    """Latent token structure shared by every synthetic task.

    Content tokens are partitioned into ``n_groups`` latent groups and carry
    Zipf-like frequencies; all families sample words through this object so
    their unigram statistics agree.
    """

    def __init__(self, latent_seed: int, vocab_size: int, n_groups: int = 6):
        rng = np.random.default_rng([latent_seed, 7919])
        n_content = vocab_size - N_SPECIAL
        if n_content < 2 * n_groups:
            raise ValueError("vocabulary too small for the requested number of groups")
        self.n_groups = n_groups
        perm = rng.permutation(n_content)
        self.groups = [np.sort(g) for g in np.array_split(perm, n_groups)]
        self.weights = []
        for g in self.groups:
            ranks = rng.permutation(len(g))
            w = 1.0 / (ranks + 1.0) ** 0.5
            self.weights.append(w / w.sum())
        self.group_of = np.empty(n_content, dtype=np.int64)
        for gi, g in enumerate(self.groups):
            self.group_of[g] = gi

    def words(self, group: int, n: int, rng: np.random.Generator) -> list[int]:
        return list(rng.choice(self.groups[group], size=n, p=self.weights[group]))

    def other_groups(self, group: int, n: int, rng: np.random.Generator) -> list[int]:
        others = [g for g in range(self.n_groups) if g != group]
        return list(rng.choice(others, size=n))


def _text(words: Iterable[int]) -> str:
    return " ".join(f"t{int(w)}" for w in words)


def _dominant_sequence(lex: Lexicon, g: int, length: int, n_dom: int, rng) -> list[int]:
    while True:
        other = lex.other_groups(g, length - n_dom, rng)
        if not other or np.bincount(other).max() < n_dom:
            break
    words = lex.words(g, n_dom, rng) + [lex.words(h, 1, rng)[0] for h in other]
    return [words[i] for i in rng.permutation(length)]


def synth_generate(
    family: str,
    size: int,
    difficulty_seed: int,
    latent_seed: int = 0,
    vocab_size: int = 64,
    n_groups: int = 6,
) -> Dataset:
    """A learnable toy dataset whose labels depend on latent token groups.

    classification: the label is a task-specific map of the sequence's
    dominant group. summarization: the target lists the dominant-group words
    in order. mrc: the answer is the contiguous run of words sharing the
    question word's group. commonsense: the gold candidate shares the
    context's dominant group.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}")
    lex = Lexicon(latent_seed, vocab_size, n_groups)
    prng = np.random.default_rng([difficulty_seed, 1])
    rng = np.random.default_rng([difficulty_seed, 2])
    G = n_groups
    records = []
    num_labels = None
    if family == "classification":
        num_labels = int(prng.integers(2, 5))
        label_of = np.empty(G, dtype=np.int64)
        label_of[prng.permutation(G)] = np.arange(G) % num_labels
        length = int(prng.integers(8, 13))
        n_dom = int(math.ceil(prng.uniform(0.4, 0.55) * length))
        for _ in range(size):
            g = int(rng.integers(G))
            records.append({"text": _text(_dominant_sequence(lex, g, length, n_dom, rng)), "label": int(label_of[g])})
    elif family == "summarization":
        length = int(prng.integers(8, 13))
        n_dom = int(math.ceil(prng.uniform(0.35, 0.5) * length))
        for _ in range(size):
            g = int(rng.integers(G))
            seq = _dominant_sequence(lex, g, length, n_dom, rng)
            target = [w for w in seq if lex.group_of[w] == g]
            records.append({"source": _text(seq), "target": _text(target)})
    elif family == "mrc":
        length = int(prng.integers(10, 15))
        for _ in range(size):
            g = int(rng.integers(G))
            span = int(rng.integers(1, 4))
            start = int(rng.integers(0, length - span + 1))
            passage = [lex.words(h, 1, rng)[0] for h in lex.other_groups(g, length, rng)]
            passage[start:start + span] = lex.words(g, span, rng)
            question = lex.words(g, 1, rng)
            records.append({"passage": _text(passage), "question": _text(question), "answer_start": start, "answer_end": start + span - 1})
    else:
        n_cand = int(prng.choice([3, 4]))
        length = int(prng.integers(6, 10))
        n_dom = int(math.ceil(0.5 * length))
        for _ in range(size):
            g = int(rng.integers(G))
            ctx = _dominant_sequence(lex, g, length, n_dom, rng)
            distractors = rng.permutation([h for h in range(G) if h != g])[: n_cand - 1]
            groups = [g] + [int(h) for h in distractors]
            order = rng.permutation(n_cand)
            cands = [_text(lex.words(groups[k], int(rng.integers(2, 4)), rng)) for k in order]
            records.append({"context": _text(ctx), "candidates": cands, "gold": int(np.argmin(order))})
    return Dataset(family, tuple(records), num_labels)


def synth_task(
    task_id: str,
    family: str,
    train_size: int,
    eval_size: int,
    difficulty_seed: int,
    latent_seed: int = 0,
    vocab_size: int = 64,
    n_groups: int = 6,
) -> TaskSpec:
    data = synth_generate(family, train_size + eval_size, difficulty_seed, latent_seed, vocab_size, n_groups)
    train = data.subset(range(train_size))
    ev = data.subset(range(train_size, train_size + eval_size))
    ref = f"synth:{family}:difficulty={difficulty_seed}:latent={latent_seed}"
    return TaskSpec(task_id, family, train.n_predictions(vocab_size), train_size, eval_size, ref, train, ev)


# --- splits and subsets -------------------------------------------------------


def default_fractions() -> np.ndarray:
    return np.linspace(0.10, 1.00, 9)


def split_indices(n: int, fractions: Sequence[float] | None = None, seed: int = 0) -> list[np.ndarray]:
    """Sorted index subsets of size ``floor(f * n)``, each drawn independently
    without replacement."""
    fr = default_fractions() if fractions is None else np.asarray(fractions, dtype=np.float64)
    if ((fr <= 0) | (fr > 1)).any():
        raise ValueError(f"fractions must lie in (0, 1], got {fr.tolist()}")
    out = []
    for k, f in enumerate(fr):
        size = int(math.floor(f * n + 1e-9))
        rng = np.random.default_rng([seed, k])
        out.append(np.sort(rng.choice(n, size=size, replace=False)))
    return out


def low_resource_splits(dataset: Dataset, fractions: Sequence[float] | None = None, seed: int = 0) -> list[Dataset]:
    """Ordered low-resource subsets; records keep their original order."""
    return [dataset.subset(idx) for idx in split_indices(len(dataset), fractions, seed)]


def nested_task_subsets(task_ids: Sequence[str], sizes: Sequence[int], probes: Sequence[str] = (), seed: int = 0) -> list[tuple[str, ...]]:
    """Nested prefixes of one task ordering: probes first, the rest shuffled.

    Each subset contains every smaller one. When the smallest size is below the
    probe count it holds a prefix of the probes.
    """
    probes = list(probes)
    missing = [p for p in probes if p not in task_ids]
    if missing:
        raise ValueError(f"probe tasks not in task list: {missing}")
    rest = [t for t in task_ids if t not in probes]
    rng = np.random.default_rng(seed)
    order = probes + [rest[i] for i in rng.permutation(len(rest))]
    out = []
    for s in sorted(sizes):
        if not 0 <= s <= len(order):
            raise ValueError(f"subset size {s} outside [0, {len(order)}]")
        out.append(tuple(order[:s]))
    return out


# --- collation -----------------------------------------------------------------


def _pad(seqs: Sequence[np.ndarray], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    if max_len is not None and T > max_len:
        raise ValueError(f"sequence of length {T} exceeds max_positions={max_len}")
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids == PAD


def collate(family: str, items: Sequence[dict], max_len: int | None = None) -> dict:
    """Stack encoded records into padded id arrays plus the targets each loss needs."""
    B = len(items)
    if family == "classification":
        ids, pad = _pad([np.concatenate([[CLS], it["ids"]]) for it in items], max_len)
        return {"ids": ids, "pad": pad, "labels": np.array([it["label"] for it in items])}
    if family == "commonsense":
        M = max(len(it["cands"]) for it in items)
        seqs, cmask = [], np.zeros((B, M), dtype=bool)
        for b, it in enumerate(items):
            for m in range(M):
                if m < len(it["cands"]):
                    seqs.append(np.concatenate([[CLS], it["ctx"], [SEP], it["cands"][m]]))
                    cmask[b, m] = True
                else:
                    seqs.append(np.array([CLS]))
        ids, pad = _pad(seqs, max_len)
        return {"ids": ids, "pad": pad, "cand_mask": cmask, "gold": np.array([it["gold"] for it in items]),
                "n": cmask.sum(axis=1)}
    if family == "mrc":
        seqs = [np.concatenate([[CLS], it["q"], [SEP], it["p"]]) for it in items]
        ids, pad = _pad(seqs, max_len)
        lens = np.array([len(it["p"]) for it in items])
        offs = np.array([len(it["q"]) + 2 for it in items])
        L = lens.max()
        cols = np.minimum(offs[:, None] + np.arange(L)[None, :], ids.shape[1] - 1)
        valid = np.arange(L)[None, :] < lens[:, None]
        return {"ids": ids, "pad": pad, "passage_index": (np.arange(B)[:, None], cols, valid),
                "start": np.array([it["start"] for it in items]), "end": np.array([it["end"] for it in items]), "n": lens}
    if family == "summarization":
        ids, pad = _pad([it["src"] for it in items], max_len)
        dec_in, _ = _pad([np.concatenate([[BOS], it["tgt"]]) for it in items], max_len)
        dec_out, tpad = _pad([np.concatenate([it["tgt"], [EOS]]) for it in items], max_len)
        return {"ids": ids, "pad": pad, "dec_in": dec_in, "dec_out": dec_out, "tgt_mask": ~tpad}
    raise ValueError(f"unknown task family {family!r}")
