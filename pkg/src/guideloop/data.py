"""Domain types, synthetic corpus generation, splits, and JSONL persistence."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PRESENT = 1
ABSENT = -1
MISSING = 0  # covers both "ambiguous mention" and "not mentioned"

FINDING_STATES = (PRESENT, ABSENT, MISSING)

SPLITS = ("train", "validation", "finetune", "test")

DEFAULT_LABELS = [
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "edema",
    "pleural effusion",
    "pneumonia",
    "pneumothorax",
    "fracture",
]

DEFAULT_NEGATION_CUES = ["no", "without", "negative for", "free of", "absence of"]
DEFAULT_UNCERTAINTY_CUES = [
    "possible",
    "possibly",
    "may",
    "cannot exclude",
    "suspected",
    "equivocal",
]


class ConfigError(ValueError):
    """Raised for invalid generator or loop configuration."""


class DatasetError(ValueError):
    """Raised when a dataset file fails to parse or violates invariants."""


@dataclass(frozen=True)
class FindingOntology:
    """Ordered finding labels plus the cue lists the labeler relies on."""

    labels: tuple[str, ...]
    keywords: dict[str, tuple[str, ...]]
    negation_cues: tuple[str, ...]
    uncertainty_cues: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ConfigError("ontology needs at least one label")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("ontology labels must be unique")
        for label in self.labels:
            if not self.keywords.get(label):
                raise ConfigError(f"label {label!r} has no keywords")

    @property
    def size(self) -> int:
        return len(self.labels)

    @classmethod
    def default(cls) -> "FindingOntology":
        return cls(
            labels=tuple(DEFAULT_LABELS),
            keywords={label: (label,) for label in DEFAULT_LABELS},
            negation_cues=tuple(DEFAULT_NEGATION_CUES),
            uncertainty_cues=tuple(DEFAULT_UNCERTAINTY_CUES),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "FindingOntology":
        raw = json.loads(Path(path).read_text())
        return cls(
            labels=tuple(raw["labels"]),
            keywords={k: tuple(v) for k, v in raw["keywords"].items()},
            negation_cues=tuple(raw["negation_cues"]),
            uncertainty_cues=tuple(raw["uncertainty_cues"]),
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                {
                    "labels": list(self.labels),
                    "keywords": {k: list(v) for k, v in self.keywords.items()},
                    "negation_cues": list(self.negation_cues),
                    "uncertainty_cues": list(self.uncertainty_cues),
                },
                indent=2,
            )
        )


@dataclass
class Scan:
    """One synthetic exam: feature vector, ground-truth findings, reference report."""

    id: str
    x: np.ndarray
    findings: np.ndarray  # int vector in {-1, 0, 1}, length L
    report: str
    split: str

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "x": [float(v) for v in self.x],
            "findings": [int(v) for v in self.findings],
            "report": self.report,
            "split": self.split,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scan":
        findings = np.asarray(rec["findings"], dtype=int)
        if not np.isin(findings, FINDING_STATES).all():
            raise DatasetError(f"scan {rec.get('id')}: findings outside {{-1,0,1}}")
        if rec["split"] not in SPLITS:
            raise DatasetError(f"scan {rec.get('id')}: unknown split {rec['split']!r}")
        return cls(
            id=rec["id"],
            x=np.asarray(rec["x"], dtype=float),
            findings=findings,
            report=rec["report"],
            split=rec["split"],
        )

    def __eq__(self, other):
        if not isinstance(other, Scan):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.findings, other.findings)
            and self.report == other.report
            and self.split == other.split
        )


@dataclass
class Dataset:
    scans: list[Scan]
    config_hash: str = ""

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.config_hash == other.config_hash and self.scans == other.scans

    def by_split(self, split: str) -> list[Scan]:
        return [s for s in self.scans if s.split == split]

    def by_id(self) -> dict[str, Scan]:
        return {s.id: s for s in self.scans}


DEFAULT_SPLIT_PROPORTIONS = {
    "train": 0.583,
    "validation": 0.167,
    "finetune": 0.083,
    "test": 0.167,
}


@dataclass
class GeneratorConfig:
    n: int = 1200
    d: int = 16
    L: int = 8
    p_present: float = 0.25
    p_absent: float = 0.60
    p_ambiguous: float = 0.15
    noise_std: float = 0.1
    # mention probability for absent findings in the reference report, so that
    # "absent" and "missing" are distinguishable corpus phenomena
    p_mention_absent: float = 0.5
    split_proportions: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_SPLIT_PROPORTIONS)
    )
    seed: int = 7

    def validate(self, ontology: FindingOntology) -> None:
        if self.L != ontology.size:
            raise ConfigError(f"L={self.L} does not match ontology size {ontology.size}")
        if self.d < self.L:
            raise ConfigError(f"d={self.d} must be >= L={self.L}")
        p_sum = self.p_present + self.p_absent + self.p_ambiguous
        if abs(p_sum - 1.0) > 1e-9:
            raise ConfigError(f"finding probabilities sum to {p_sum}, expected 1")
        s_sum = sum(self.split_proportions.values())
        if abs(s_sum - 1.0) > 1e-9:
            raise ConfigError(f"split proportions sum to {s_sum}, expected 1")
        if set(self.split_proportions) != set(SPLITS):
            raise ConfigError(f"split proportions must cover exactly {SPLITS}")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "L": self.L,
            "p_present": self.p_present,
            "p_absent": self.p_absent,
            "p_ambiguous": self.p_ambiguous,
            "noise_std": self.noise_std,
            "p_mention_absent": self.p_mention_absent,
            "split_proportions": self.split_proportions,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "GeneratorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**raw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def split_counts(n: int, proportions: dict[str, float]) -> dict[str, int]:
    """Integer split sizes: floor then distribute the remainder by largest fraction."""
    exact = {s: n * proportions[s] for s in SPLITS}
    counts = {s: int(np.floor(exact[s])) for s in SPLITS}
    remainder = n - sum(counts.values())
    order = sorted(SPLITS, key=lambda s: exact[s] - counts[s], reverse=True)
    for s in order[:remainder]:
        counts[s] += 1
    return counts


def mixing_matrix(config: GeneratorConfig) -> np.ndarray:
    """The fixed d x L matrix mapping encoded findings into feature space."""
    rng = np.random.default_rng([config.seed, 0])
    return rng.standard_normal((config.d, config.L)) / np.sqrt(config.L)


def render_report(
    findings: np.ndarray,
    ontology: FindingOntology,
    mention_absent: np.ndarray,
) -> str:
    """Template rendering of ground-truth findings into a reference report.

    mention_absent[i] controls whether an absent finding is stated at all.
    """
    parts = []
    for i, label in enumerate(ontology.labels):
        state = findings[i]
        if state == PRESENT:
            parts.append(f"there is {label}.")
        elif state == ABSENT:
            if mention_absent[i]:
                parts.append(f"no {label}.")
        else:
            parts.append(f"possible {label}.")
    return " ".join(parts)


def generate_dataset(
    config: GeneratorConfig,
    seed: int | None = None,
    ontology: FindingOntology | None = None,
) -> Dataset:
    """Synthesize a corpus of scans; pure function of (config, seed)."""
    ontology = ontology or FindingOntology.default()
    if seed is not None:
        config = GeneratorConfig(**{**config.to_dict(), "seed": seed})
    config.validate(ontology)

    A = mixing_matrix(config)
    rng = np.random.default_rng([config.seed, 1])
    counts = split_counts(config.n, config.split_proportions)
    split_seq = [s for s in SPLITS for _ in range(counts[s])]

    probs = [config.p_ambiguous, config.p_present, config.p_absent]
    state_values = np.array([MISSING, PRESENT, ABSENT])

    scans = []
    for i in range(config.n):
        choice = rng.choice(3, size=config.L, p=probs)
        findings = state_values[choice]
        mention_absent = rng.random(config.L) < config.p_mention_absent
        enc = findings.astype(float)  # enc: +1/-1/0 already
        noise = rng.normal(0.0, config.noise_std, size=config.d) if config.noise_std > 0 else 0.0
        x = A @ enc + noise
        report = render_report(findings, ontology, mention_absent)
        scans.append(
            Scan(
                id=f"scan-{i:05d}",
                x=np.asarray(x, dtype=float),
                findings=findings,
                report=report,
                split=split_seq[i],
            )
        )
    return Dataset(scans=scans, config_hash=config.hash())


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w") as f:
        f.write(json.dumps({"config_hash": dataset.config_hash}) + "\n")
        for scan in dataset.scans:
            f.write(json.dumps(scan.to_record()) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    scans: list[Scan] = []
    seen: set[str] = set()
    config_hash = ""
    with path.open() as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed JSON line: {e}") from e
            if lineno == 1 and "config_hash" in rec and "id" not in rec:
                config_hash = rec["config_hash"]
                continue
            try:
                scan = Scan.from_record(rec)
            except (KeyError, DatasetError) as e:
                raise DatasetError(f"{path}:{lineno}: bad scan record: {e}") from e
            if scan.id in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate scan id {scan.id!r}")
            seen.add(scan.id)
            scans.append(scan)
    return Dataset(scans=scans, config_hash=config_hash)


def split_sizes(dataset: Dataset) -> dict[str, int]:
    sizes = {s: 0 for s in SPLITS}
    for scan in dataset.scans:
        sizes[scan.split] += 1
    return sizes
