"""Clip manifests, MOS label scaling, and train/validation splits.

A manifest is a UTF-8 CSV with header ``id,source,corpus,mos_raw,duration_s``
(duration optional, may be empty). Labels live on the corpus-native scale:
1-5 everywhere except IUBloomington, which is rated 0-100.

Splits are produced by a Fisher-Yates shuffle driven by SplitMix64 so the
same (manifest, seed) pair yields the same split on any platform or
implementation of this format. Records from all corpora are pooled before
the shuffle; no per-corpus stratification is applied.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import DataError


class Corpus(Enum):
    TENCENT = "Tencent"
    NISQA = "NISQA"
    IU_BLOOMINGTON = "IUBloomington"
    PSTN = "PSTN"
    SYNTHETIC = "Synthetic"


# corpus-native MOS ranges, inclusive
MOS_RANGES: dict[Corpus, tuple[float, float]] = {
    Corpus.TENCENT: (1.0, 5.0),
    Corpus.NISQA: (1.0, 5.0),
    Corpus.IU_BLOOMINGTON: (0.0, 100.0),
    Corpus.PSTN: (1.0, 5.0),
    Corpus.SYNTHETIC: (1.0, 5.0),
}

MANIFEST_FIELDS = ("id", "source", "corpus", "mos_raw", "duration_s")


class ManifestError(DataError):
    pass


@dataclass(frozen=True)
class ClipRecord:
    id: str
    source: Path
    corpus: Corpus
    mos_raw: float
    duration_s: float | None = None


class Manifest:
    """Ordered, id-unique collection of clip records."""

    def __init__(self, records: list[ClipRecord]):
        by_id: dict[str, ClipRecord] = {}
        for rec in records:
            if rec.id in by_id:
                raise ManifestError(f"duplicate clip id {rec.id!r}")
            lo, hi = MOS_RANGES[rec.corpus]
            if not (lo <= rec.mos_raw <= hi):
                raise ManifestError(
                    f"clip {rec.id!r}: mos_raw={rec.mos_raw} outside "
                    f"[{lo}, {hi}] for corpus {rec.corpus.value}"
                )
            by_id[rec.id] = rec
        self.records = list(records)
        self._by_id = by_id

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, clip_id: str) -> ClipRecord:
        try:
            return self._by_id[clip_id]
        except KeyError:
            raise ManifestError(f"unknown clip id {clip_id!r}") from None

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self._by_id

    def ids(self) -> list[str]:
        return [rec.id for rec in self.records]


def load_manifest(path: str | Path) -> Manifest:
    """Parse a manifest CSV; raises ManifestError with the offending line."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty file, expected a header row")
        missing = [f for f in MANIFEST_FIELDS[:4] if f not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path}: header is missing columns {missing}")
        for row in reader:
            line = reader.line_num
            try:
                corpus = Corpus(row["corpus"])
            except ValueError:
                raise ManifestError(
                    f"{path}:{line}: unknown corpus {row['corpus']!r}"
                ) from None
            try:
                mos_raw = float(row["mos_raw"])
            except (TypeError, ValueError):
                raise ManifestError(
                    f"{path}:{line}: mos_raw {row['mos_raw']!r} is not a number"
                ) from None
            dur = row.get("duration_s") or None
            try:
                duration = float(dur) if dur is not None else None
            except ValueError:
                raise ManifestError(
                    f"{path}:{line}: duration_s {dur!r} is not a number"
                ) from None
            if not row["id"]:
                raise ManifestError(f"{path}:{line}: empty clip id")
            records.append(
                ClipRecord(
                    id=row["id"],
                    source=Path(row["source"]),
                    corpus=corpus,
                    mos_raw=mos_raw,
                    duration_s=duration,
                )
            )
    try:
        return Manifest(records)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for rec in manifest:
            writer.writerow(
                [
                    rec.id,
                    str(rec.source),
                    rec.corpus.value,
                    repr(rec.mos_raw),
                    "" if rec.duration_s is None else repr(rec.duration_s),
                ]
            )


def normalize_label(mos_raw: float, corpus: Corpus) -> float:
    """Map a corpus-native MOS onto [0, 1] (the model's sigmoid range)."""
    lo, hi = MOS_RANGES[corpus]
    if not (lo <= mos_raw <= hi):
        raise ValueError(
            f"mos_raw={mos_raw} outside [{lo}, {hi}] for {corpus.value}"
        )
    return (mos_raw - lo) / (hi - lo)


def denormalize_label(value: float, corpus: Corpus) -> float:
    """Exact inverse of normalize_label, back to the corpus-native scale."""
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"normalized label {value} outside [0, 1]")
    lo, hi = MOS_RANGES[corpus]
    return lo + value * (hi - lo)


def to_mos_scale(value: float) -> float:
    """Map a normalized label onto the common 1-5 MOS scale used for metrics."""
    return 1.0 + 4.0 * value


_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 PRNG (Steele/Lea/Flood 2014 constants).

    Chosen over numpy's Generator because the split contract requires the
    exact shuffle to be reproducible from the seed alone, independent of
    numpy version or platform.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        # rejection sampling keeps the draw unbiased
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            r = self.next_u64()
            if r <= limit:
                return r % n


def fisher_yates(items: list, rng: SplitMix64) -> list:
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


class SplitStrategy(Enum):
    ALL_CORPORA = "AllCorpora"
    TENCENT_PSTN_SUBSET = "TencentPstnSubset"
    CHALLENGE_ORIGINAL = "ChallengeOriginal"


@dataclass(frozen=True)
class SplitPair:
    train: frozenset[str]
    val: frozenset[str]
    seed: int
    strategy: SplitStrategy


TRAIN_FRACTION = 0.85


def split_all_corpora(manifest: Manifest, seed: int) -> SplitPair:
    """Pool every corpus, shuffle once, ceil(85%) to train, rest to val."""
    if len(manifest) == 0:
        raise ValueError("cannot split an empty manifest")
    ids = fisher_yates(manifest.ids(), SplitMix64(seed))
    n_train = math.ceil(TRAIN_FRACTION * len(ids))
    train, val = ids[:n_train], ids[n_train:]
    if not val:
        warnings.warn(
            f"validation split is empty ({len(ids)} records, ceil rule)",
            stacklevel=2,
        )
    return SplitPair(
        train=frozenset(train),
        val=frozenset(val),
        seed=seed,
        strategy=SplitStrategy.ALL_CORPORA,
    )


def restrict_split(
    manifest: Manifest, split: SplitPair, corpora: set[Corpus]
) -> SplitPair:
    """Keep only records whose corpus is in `corpora`.

    Result sets are subsets of the input split, so training on the
    restriction never leaks into the unrestricted validation set.
    """
    keep = {rec.id for rec in manifest if rec.corpus in corpora}
    train = split.train & keep
    val = split.val & keep
    if not train:
        raise ValueError(
            "restriction leaves an empty training set (untrainable): "
            f"corpora={sorted(c.value for c in corpora)}"
        )
    if not val:
        warnings.warn("restriction leaves an empty validation set", stacklevel=2)
    strategy = (
        SplitStrategy.TENCENT_PSTN_SUBSET
        if corpora == {Corpus.TENCENT, Corpus.PSTN}
        else split.strategy
    )
    return SplitPair(
        train=frozenset(train), val=frozenset(val), seed=split.seed, strategy=strategy
    )


CHALLENGE_FRACTIONS: dict[Corpus, float] = {
    Corpus.TENCENT: 0.80,
    Corpus.PSTN: 0.95,
}


def split_challenge_original(
    manifest: Manifest,
    seed: int,
    fractions: dict[Corpus, float] | None = None,
) -> SplitPair:
    """The challenge's original division: per-corpus fractions, other corpora dropped."""
    fractions = CHALLENGE_FRACTIONS if fractions is None else fractions
    train: list[str] = []
    val: list[str] = []
    for idx, (corpus, frac) in enumerate(sorted(fractions.items(), key=lambda kv: kv[0].value)):
        ids = [rec.id for rec in manifest if rec.corpus is corpus]
        if not ids:
            continue
        shuffled = fisher_yates(ids, SplitMix64(seed + idx))
        n_train = math.ceil(frac * len(shuffled))
        train.extend(shuffled[:n_train])
        val.extend(shuffled[n_train:])
    if not train:
        raise ValueError("challenge split produced an empty training set")
    return SplitPair(
        train=frozenset(train),
        val=frozenset(val),
        seed=seed,
        strategy=SplitStrategy.CHALLENGE_ORIGINAL,
    )


def save_split(split: SplitPair, out_dir: str | Path) -> None:
    """Serialize as meta header + two sorted id-list files (canonical bytes)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "split.meta").write_text(
        f"seed = {split.seed}\nstrategy = {split.strategy.value}\n", encoding="utf-8"
    )
    for name, ids in (("train", split.train), ("val", split.val)):
        body = "".join(i + "\n" for i in sorted(ids))
        (out_dir / f"{name}.ids").write_text(body, encoding="utf-8")


def load_split(in_dir: str | Path) -> SplitPair:
    in_dir = Path(in_dir)
    meta: dict[str, str] = {}
    for line in (in_dir / "split.meta").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    ids = {}
    for name in ("train", "val"):
        text = (in_dir / f"{name}.ids").read_text(encoding="utf-8")
        ids[name] = frozenset(line for line in text.splitlines() if line)
    return SplitPair(
        train=ids["train"],
        val=ids["val"],
        seed=int(meta["seed"]),
        strategy=SplitStrategy(meta["strategy"]),
    )
