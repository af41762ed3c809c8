"""Vocabularies, clinical records, per-center splits and batch assembly.

A record is one encounter: a center id plus diagnosis / procedure /
medication code sets. Codes are stored as integer ids into ordered
vocabularies; the two reserved embedding rows CLS and MASK live just past the
vocabulary id range.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TRAIN_FRACTION = 0.8
VAL_FRACTION = 0.1

# tags for deriving independent RNG streams from one experiment seed
_SPLIT_TAG = 11
_EPOCH_TAG = 23
_VAL_TAG = 37


class IngestError(ValueError):
    """Raised when a records/vocabulary file violates the data contract."""


def stable_center_key(center_id: str) -> int:
    """Platform-stable integer key for a center id (for seed derivation)."""
    return zlib.crc32(center_id.encode("utf-8"))


def derived_rng(*entries) -> np.random.Generator:
    """Deterministic RNG from a tuple of non-negative integer entries."""
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entries]))


class Vocabularies:
    """Ordered diagnosis / procedure / medication code lists.

    Ids are the list positions; CLS and MASK ids for each code family sit at
    size and size+1 so embedding tables carry two reserved rows.
    """

    def __init__(self, diagnoses, procedures, medications):
        self.diagnoses = tuple(diagnoses)
        self.procedures = tuple(procedures)
        self.medications = tuple(medications)
        for name, codes in (("diagnosis", self.diagnoses),
                            ("procedure", self.procedures),
                            ("medication", self.medications)):
            if len(set(codes)) != len(codes):
                raise IngestError(f"duplicate {name} codes in vocabulary")
        self._diag_index = {c: i for i, c in enumerate(self.diagnoses)}
        self._proc_index = {c: i for i, c in enumerate(self.procedures)}
        self._med_index = {c: i for i, c in enumerate(self.medications)}

    @property
    def n_diagnoses(self) -> int:
        return len(self.diagnoses)

    @property
    def n_procedures(self) -> int:
        return len(self.procedures)

    @property
    def n_medications(self) -> int:
        return len(self.medications)

    def diag_cls_id(self) -> int:
        return self.n_diagnoses

    def diag_mask_id(self) -> int:
        return self.n_diagnoses + 1

    def proc_cls_id(self) -> int:
        return self.n_procedures

    def proc_mask_id(self) -> int:
        return self.n_procedures + 1

    def diag_id(self, code: str) -> int:
        return self._diag_index[code]

    def proc_id(self, code: str) -> int:
        return self._proc_index[code]

    def med_id(self, code: str) -> int:
        return self._med_index[code]


@dataclass(frozen=True)
class Record:
    """One encounter: sorted, de-duplicated id tuples per code family."""

    center_id: str
    diagnoses: tuple[int, ...]
    procedures: tuple[int, ...]
    medications: tuple[int, ...]


def make_record(center_id: str, diagnoses, procedures, medications,
                vocabs: Vocabularies | None = None) -> Record:
    """Normalize id iterables into a Record, validating ranges when possible."""
    diag = tuple(sorted(set(int(i) for i in diagnoses)))
    proc = tuple(sorted(set(int(i) for i in procedures)))
    med = tuple(sorted(set(int(i) for i in medications)))
    if not diag:
        raise IngestError(f"record for center {center_id!r} has an empty diagnosis set")
    if vocabs is not None:
        if diag and diag[-1] >= vocabs.n_diagnoses:
            raise IngestError(f"diagnosis id {diag[-1]} out of range")
        if proc and proc[-1] >= vocabs.n_procedures:
            raise IngestError(f"procedure id {proc[-1]} out of range")
        if med and med[-1] >= vocabs.n_medications:
            raise IngestError(f"medication id {med[-1]} out of range")
    return Record(center_id, diag, proc, med)


def make_splits(n_records: int, seed: int, center_id: str):
    """Deterministic 8:1:1 index partition for one center."""
    rng = derived_rng(seed, _SPLIT_TAG, stable_center_key(center_id))
    perm = rng.permutation(n_records)
    n_train = round(TRAIN_FRACTION * n_records)
    n_val = round(VAL_FRACTION * n_records)
    train = tuple(int(i) for i in perm[:n_train])
    val = tuple(int(i) for i in perm[n_train:n_train + n_val])
    test = tuple(int(i) for i in perm[n_train + n_val:])
    return train, val, test


class MultiCenterDataset:
    """Per-center record lists with train/validation/test splits."""

    SPLIT_NAMES = ("train", "validation", "test")

    def __init__(self, vocabs: Vocabularies, records_by_center: dict[str, tuple[Record, ...]],
                 split_seed: int):
        self.vocabs = vocabs
        self.records_by_center = {c: tuple(rs) for c, rs in sorted(records_by_center.items())}
        self.split_seed = int(split_seed)
        self.splits = {c: make_splits(len(rs), self.split_seed, c)
                       for c, rs in self.records_by_center.items()}

    @property
    def centers(self) -> tuple[str, ...]:
        return tuple(self.records_by_center.keys())

    def center_size(self, center_id: str) -> int:
        return len(self.records_by_center[center_id])

    def split_records(self, center_id: str, split: str) -> list[Record]:
        idx = self.splits[center_id][self.SPLIT_NAMES.index(split)]
        records = self.records_by_center[center_id]
        return [records[i] for i in idx]

    def pooled_records(self, split: str) -> list[Record]:
        out: list[Record] = []
        for center in self.centers:
            out.extend(self.split_records(center, split))
        return out

    def n_records(self) -> int:
        return sum(len(rs) for rs in self.records_by_center.values())


def prescription_distribution(dataset: MultiCenterDataset, center_id: str) -> np.ndarray:
    """Medication frequency counts of one center, normalized to sum 1."""
    if center_id not in dataset.records_by_center:
        raise KeyError(f"unknown center {center_id!r}")
    records = dataset.records_by_center[center_id]
    if not records:
        raise ValueError(f"center {center_id!r} has no records")
    counts = np.zeros(dataset.vocabs.n_medications, dtype=np.float64)
    for record in records:
        for m in record.medications:
            counts[m] += 1.0
    total = counts.sum()
    if total == 0:
        raise ValueError(f"center {center_id!r} has no medications on record")
    return counts / total


# ---------------------------------------------------------------------------
# masking and batch assembly
# ---------------------------------------------------------------------------

def _mask_ids(ids: list[int], mask_token: int, ratio: float, vocab_size: int,
              rng: np.random.Generator):
    """Replace round(ratio*len) ids with the MASK token, at least one when
    the set is non-empty; the multi-hot target marks exactly the masked ids."""
    target = np.zeros(vocab_size, dtype=np.float64)
    masked = list(ids)
    if masked:
        k = int(ratio * len(masked) + 0.5)  # round half up
        k = min(max(k, 1), len(masked))
        positions = rng.choice(len(masked), size=k, replace=False)
        for pos in positions:
            target[masked[pos]] = 1.0
            masked[pos] = mask_token
    return masked, target


def mask_sample(record: Record, mask_ratio: float, rng: np.random.Generator,
                vocabs: Vocabularies):
    """Independently mask the diagnosis and procedure sets of one record."""
    if not (0.0 < mask_ratio < 1.0):
        raise ValueError("mask_ratio must lie in (0, 1)")
    diag, y_d = _mask_ids(list(record.diagnoses), vocabs.diag_mask_id(),
                          mask_ratio, vocabs.n_diagnoses, rng)
    proc, y_p = _mask_ids(list(record.procedures), vocabs.proc_mask_id(),
                          mask_ratio, vocabs.n_procedures, rng)
    return diag, proc, y_d, y_p


@dataclass
class Batch:
    """Collated id matrices with attention masks and multi-hot targets.

    Row layout per tower: [CLS, prompt slots (tune mode), codes..., padding].
    Prompt slots hold a placeholder id; the tuning stage overwrites their
    embeddings in place. Padding positions are masked out of attention.
    """

    diag_ids: np.ndarray        # (B, Ld) int64
    diag_mask: np.ndarray       # (B, Ld) bool
    proc_ids: np.ndarray        # (B, Lp) int64
    proc_mask: np.ndarray       # (B, Lp) bool
    diag_targets: np.ndarray    # (B, |D|) multi-hot of masked diagnoses
    proc_targets: np.ndarray    # (B, |P|) multi-hot of masked procedures
    med_targets: np.ndarray     # (B, |M|) multi-hot of prescribed medications
    centers: tuple[str, ...]
    n_prompt: int

    @property
    def n_records(self) -> int:
        return self.diag_ids.shape[0]


def _pad_tower(sequences: list[list[int]], cls_id: int, n_prompt: int) -> tuple[np.ndarray, np.ndarray]:
    width = 1 + n_prompt + max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), cls_id, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for row, seq in enumerate(sequences):
        mask[row, :1 + n_prompt + len(seq)] = True
        ids[row, 1 + n_prompt:1 + n_prompt + len(seq)] = seq
    return ids, mask


def collate(records: list[Record], vocabs: Vocabularies, mode: str, max_len: int,
            n_prompt: int = 0, mask_ratio: float = 0.15,
            rng: np.random.Generator | None = None) -> Batch:
    """Assemble records into a padded batch.

    mode "pretrain" masks each record's code sets and fills the
    mask-prediction targets; mode "tune" leaves codes intact and fills the
    medication targets. Code sets are truncated to fit max_len including the
    CLS position and any prompt slots.
    """
    if not records:
        raise ValueError("collate requires at least one record")
    if mode not in ("pretrain", "tune"):
        raise ValueError(f"unknown collate mode {mode!r}")
    keep = max_len - 1 - n_prompt
    if keep < 1:
        raise ValueError("max_len leaves no room for codes")

    diag_seqs, proc_seqs = [], []
    y_d = np.zeros((len(records), vocabs.n_diagnoses), dtype=np.float64)
    y_p = np.zeros((len(records), vocabs.n_procedures), dtype=np.float64)
    y_m = np.zeros((len(records), vocabs.n_medications), dtype=np.float64)
    for row, record in enumerate(records):
        diag = list(record.diagnoses[:keep])
        proc = list(record.procedures[:keep])
        if mode == "pretrain":
            if rng is None:
                raise ValueError("pretrain collation requires an rng")
            diag, y_d[row] = _mask_ids(diag, vocabs.diag_mask_id(), mask_ratio,
                                       vocabs.n_diagnoses, rng)
            proc, y_p[row] = _mask_ids(proc, vocabs.proc_mask_id(), mask_ratio,
                                       vocabs.n_procedures, rng)
        else:
            y_m[row, list(record.medications)] = 1.0
        diag_seqs.append(diag)
        proc_seqs.append(proc)

    diag_ids, diag_mask = _pad_tower(diag_seqs, vocabs.diag_cls_id(), n_prompt)
    proc_ids, proc_mask = _pad_tower(proc_seqs, vocabs.proc_cls_id(), n_prompt)
    return Batch(diag_ids, diag_mask, proc_ids, proc_mask, y_d, y_p, y_m,
                 tuple(r.center_id for r in records), n_prompt)


def epoch_rng(seed: int, epoch: int, center_id: str | None = None) -> np.random.Generator:
    """Independent stream per (seed, epoch[, center]) for shuffling/masking."""
    entries = [seed, _EPOCH_TAG, epoch]
    if center_id is not None:
        entries.append(stable_center_key(center_id))
    return derived_rng(*entries)


def validation_rng(seed: int) -> np.random.Generator:
    """Fixed stream for validation-time masking, identical every epoch."""
    return derived_rng(seed, _VAL_TAG)


def iter_batches(records: list[Record], batch_size: int,
                 rng: np.random.Generator | None = None, min_size: int = 1):
    """Yield record slices of up to batch_size, shuffled when rng is given.

    Trailing slices smaller than min_size are dropped (a contrastive batch
    needs at least two records).
    """
    order = np.arange(len(records))
    if rng is not None:
        order = rng.permutation(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        if len(chunk) >= min_size:
            yield chunk


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def load_vocab_file(path) -> tuple[str, ...]:
    """One code per line; the line number is the id."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return tuple(line.strip() for line in lines if line.strip())


def save_vocab_file(path, codes) -> None:
    Path(path).write_text("".join(f"{c}\n" for c in codes), encoding="utf-8")


def _parse_record_line(line: str, lineno: int) -> dict:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise IngestError(f"line {lineno}: not valid JSON ({exc})") from None
    for field in ("center", "diag", "proc", "med"):
        if field not in raw:
            raise IngestError(f"line {lineno}: missing field {field!r}")
    return raw


def _resolve(codes, index: dict[str, int], family: str, lineno: int,
             fixed_vocab: bool) -> list[int]:
    ids = []
    for code in codes:
        if code in index:
            ids.append(index[code])
        elif fixed_vocab:
            raise IngestError(f"line {lineno}: unknown {family} code {code!r}")
        # codes dropped by top-k truncation are silently filtered
    return ids


def ingest(records_path, vocab_paths: tuple | None = None, *, seed: int,
           min_records_per_center: int = 60, top_procedures: int | None = None,
           top_medications: int | None = None) -> MultiCenterDataset:
    """Build a dataset from a records file (one JSON object per line).

    When vocab_paths (diag, proc, med files) is given the vocabularies are
    fixed and unknown codes are errors. Otherwise vocabularies are built from
    the corpus, optionally truncated to the most frequent top_procedures /
    top_medications codes; filtered-out codes are dropped from records, and
    records left without diagnoses or medications are discarded. Centers with
    fewer than min_records_per_center records are dropped with a warning.
    """
    lines = Path(records_path).read_text(encoding="utf-8").splitlines()
    raws = [_parse_record_line(line, i + 1) for i, line in enumerate(lines) if line.strip()]
    if not raws:
        raise IngestError(f"{records_path}: no records")

    if vocab_paths is not None:
        diag_v, proc_v, med_v = (load_vocab_file(p) for p in vocab_paths)
        fixed = True
    else:
        diag_counts: dict[str, int] = {}
        proc_counts: dict[str, int] = {}
        med_counts: dict[str, int] = {}
        for raw in raws:
            for c in raw["diag"]:
                diag_counts[c] = diag_counts.get(c, 0) + 1
            for c in raw["proc"]:
                proc_counts[c] = proc_counts.get(c, 0) + 1
            for c in raw["med"]:
                med_counts[c] = med_counts.get(c, 0) + 1

        def top_k(counts: dict[str, int], k: int | None) -> tuple[str, ...]:
            ranked = sorted(counts, key=lambda c: (-counts[c], c))
            return tuple(sorted(ranked[:k] if k else ranked))

        diag_v = top_k(diag_counts, None)
        proc_v = top_k(proc_counts, top_procedures)
        med_v = top_k(med_counts, top_medications)
        fixed = False

    vocabs = Vocabularies(diag_v, proc_v, med_v)
    by_center: dict[str, list[Record]] = {}
    dropped_records = 0
    for lineno, raw in enumerate(raws, 1):
        diag = _resolve(raw["diag"], vocabs._diag_index, "diagnosis", lineno, fixed)
        proc = _resolve(raw["proc"], vocabs._proc_index, "procedure", lineno, fixed)
        med = _resolve(raw["med"], vocabs._med_index, "medication", lineno, fixed)
        if fixed and not raw["diag"]:
            raise IngestError(f"line {lineno}: empty diagnosis set")
        if not diag or not med:
            dropped_records += 1
            continue
        record = make_record(str(raw["center"]), diag, proc, med, vocabs)
        by_center.setdefault(record.center_id, []).append(record)
    if dropped_records:
        log.warning("dropped %d records left empty by vocabulary truncation", dropped_records)

    kept = {}
    for center, records in sorted(by_center.items()):
        if len(records) < min_records_per_center:
            log.warning("dropping center %s with %d < %d records",
                        center, len(records), min_records_per_center)
            continue
        kept[center] = tuple(records)
    if not kept:
        raise IngestError("no center met the minimum record count")
    return MultiCenterDataset(vocabs, kept, split_seed=seed)


def save_dataset(dataset: MultiCenterDataset, out_dir) -> None:
    """Serialize to records.jsonl + three vocab files + dataset.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_vocab_file(out / "vocab_diag.txt", dataset.vocabs.diagnoses)
    save_vocab_file(out / "vocab_proc.txt", dataset.vocabs.procedures)
    save_vocab_file(out / "vocab_med.txt", dataset.vocabs.medications)
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        for center in dataset.centers:
            for r in dataset.records_by_center[center]:
                fh.write(json.dumps({
                    "center": r.center_id,
                    "diag": [dataset.vocabs.diagnoses[i] for i in r.diagnoses],
                    "proc": [dataset.vocabs.procedures[i] for i in r.procedures],
                    "med": [dataset.vocabs.medications[i] for i in r.medications],
                }, sort_keys=True) + "\n")
    (out / "dataset.json").write_text(json.dumps(
        {"split_seed": dataset.split_seed, "centers": list(dataset.centers)},
        sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_dataset(data_dir) -> MultiCenterDataset:
    """Load a directory written by save_dataset."""
    data = Path(data_dir)
    meta_path = data / "dataset.json"
    if not meta_path.exists():
        raise IngestError(f"{data_dir}: missing dataset.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return ingest(
        data / "records.jsonl",
        (data / "vocab_diag.txt", data / "vocab_proc.txt", data / "vocab_med.txt"),
        seed=meta["split_seed"],
        min_records_per_center=1,
    )
