"""The iterative fine-tuning loop and the surrogate bootstrap experiment.

Each round: generate guidance for a batch of finetune-split scans, collect
scores from a judge, refit the surrogate on all accumulated feedback (with
embeddings recomputed under the current captioner), then run a few epochs
of full-batch gradient descent on NLL plus the surrogate-score penalty.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .captioner import (
    CaptionerParams,
    Guidance,
    TOK_ABSENT,
    TOK_OMIT,
    TOK_PRESENT,
    TOK_UNCERTAIN,
    decode_argmax,
    encode,
    encode_batch,
    init_params,
    load_checkpoint,
    nll_loss_batch,
    render,
    save_checkpoint,
)
from .data import ABSENT, ConfigError, Dataset, FindingOntology, PRESENT, Scan
from .evaluate import METRICS_HEADER, evaluate
from .judges import OracleJudge, SOURCE_HUMAN, collect_human_scores
from .labeler import info_score, label_text
from .metrics import bleu4
from .surrogate import WeightedKernelRidge, rmse

STALE_POLICIES = ("reweight", "discard", "keep")


@dataclass
class LoopConfig:
    guide_weight: float = 1.0  # penalty coefficient; 0 only for ablation runs
    rounds: int = 5
    batch_per_round: int = 32
    epochs_per_round: int = 3
    learning_rate: float = 1.2
    temperature: float = 1.0
    sigma: float = 2.0
    ridge: float = 1e-2
    judge: str = "fidelity"  # fidelity | informativeness | human
    seed: int = 0
    embed_dim: int = 8
    pretrain_epochs: int = 50
    pretrain_lr: float = 0.5
    stale_policy: str = "reweight"
    accumulate: bool = True

    def validate(self) -> None:
        if self.guide_weight < 0:
            raise ConfigError("guide_weight must be >= 0 (0 only for ablations)")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if min(self.batch_per_round, self.epochs_per_round) < 1:
            raise ConfigError("batch_per_round and epochs_per_round must be >= 1")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ConfigError("learning_rate and temperature must be > 0")
        if self.stale_policy not in STALE_POLICIES:
            raise ConfigError(f"stale_policy must be one of {STALE_POLICIES}")
        if self.judge not in ("fidelity", "informativeness", "human"):
            raise ConfigError(f"unknown judge {self.judge!r}")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, raw: dict) -> "LoopConfig":
        return cls(**raw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class FeedbackRecord:
    scan_id: str
    tokens: np.ndarray
    text: str
    z: np.ndarray  # embedding at scoring time; recomputed before each fit
    q: float
    source: str
    round_created: int
    weight: float = 1.0

    def __post_init__(self):
        if not -1.0 <= self.q <= 1.0:
            raise ValueError(f"feedback score {self.q} outside [-1, 1]")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"feedback weight {self.weight} outside [0, 1]")

    def to_line(self) -> dict:
        return {
            "kind": "feedback",
            "round": self.round_created,
            "scan_id": self.scan_id,
            "tokens": [int(t) for t in self.tokens],
            "text": self.text,
            "q": self.q,
            "source": self.source,
            "weight": self.weight,
        }

    @classmethod
    def from_line(cls, raw: dict, params: CaptionerParams, scan: Scan) -> "FeedbackRecord":
        return cls(
            scan_id=raw["scan_id"],
            tokens=np.asarray(raw["tokens"], dtype=int),
            text=raw["text"],
            z=encode(params, scan.x),
            q=raw["q"],
            source=raw["source"],
            round_created=raw["round"],
            weight=raw["weight"],
        )


@dataclass
class RoundMetrics:
    round: int
    nll_validation: float
    surrogate_rmse_validation: float
    mean_judge_score_heldout: float
    decision_accuracy_heldout: float
    mean_surrogate_score_finetune: float

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite metric {name}")

    def to_row(self) -> str:
        return ",".join(
            [str(self.round)]
            + [repr(float(getattr(self, name))) for name in METRICS_HEADER[1:]]
        )


@dataclass
class LoopState:
    params: CaptionerParams
    feedback: list[FeedbackRecord] = field(default_factory=list)
    round_index: int = 0  # last completed round; 0 means pretrained only


def caption_targets(scan: Scan, ontology: FindingOntology) -> np.ndarray:
    """Pretraining target tokens, read back off the reference report so that
    unmentioned absences become OMIT and ambiguous mentions UNCERTAIN."""
    result = label_text(scan.report, ontology)
    tokens = np.empty(ontology.size, dtype=int)
    for i in range(ontology.size):
        if result.states[i] == PRESENT:
            tokens[i] = TOK_PRESENT
        elif result.states[i] == ABSENT:
            tokens[i] = TOK_ABSENT
        elif result.mentioned(i):
            tokens[i] = TOK_UNCERTAIN
        else:
            tokens[i] = TOK_OMIT
    return tokens


def split_arrays(
    dataset: Dataset, split: str, ontology: FindingOntology
) -> tuple[np.ndarray, np.ndarray]:
    scans = dataset.by_split(split)
    X = np.stack([s.x for s in scans])
    T = np.stack([caption_targets(s, ontology) for s in scans])
    return X, T


def pretrain(
    dataset: Dataset,
    ontology: FindingOntology,
    config: LoopConfig,
) -> CaptionerParams:
    """Initialize the captioner and run full-batch NLL descent on the train split."""
    d = dataset.scans[0].x.shape[0]
    params = init_params(d, config.embed_dim, ontology.size, seed=config.seed)
    X, T = split_arrays(dataset, "train", ontology)
    for _ in range(config.pretrain_epochs):
        _, g = nll_loss_batch(params, X, T)
        params.axpy(-config.pretrain_lr, g)
    return params


def augmented_loss(
    params: CaptionerParams,
    X_batch: np.ndarray,
    T_batch: np.ndarray,
    X_feedback: np.ndarray | None,
    surrogate: WeightedKernelRidge | None,
    guide_weight: float,
) -> tuple[float, CaptionerParams]:
    """Mean NLL over the batch plus guide_weight * mean(-surrogate(z)) over
    the feedback inputs. The surrogate is frozen: only captioner parameters
    receive gradients, with the penalty flowing through the encoder."""
    loss, grads = nll_loss_batch(params, X_batch, T_batch)
    if guide_weight == 0.0:
        return loss, grads
    if X_feedback is None or len(X_feedback) == 0:
        raise ValueError("penalty term undefined: no feedback records")
    Z = encode_batch(params, X_feedback)
    preds = surrogate.predict(Z)
    n = len(X_feedback)
    loss += guide_weight * float(np.mean(-preds))
    grad_Z = -(guide_weight / n) * surrogate.predict_grad_batch(Z)
    grad_pre = grad_Z * (1.0 - Z**2)
    grads.W_e += grad_pre.T @ X_feedback
    grads.b_e += grad_pre.sum(axis=0)
    return loss, grads


def _batch_indices(n_pool: int, batch: int, round_index: int, seed: int) -> list[int]:
    """Positions into the finetune pool for a 1-based round, sampling without
    replacement and reshuffling each time the pool is exhausted. Pure function
    of (seed, round_index) so interrupted runs replay identically."""
    start = (round_index - 1) * batch
    out = []
    for pos in range(start, start + batch):
        epoch, offset = divmod(pos, n_pool)
        perm = np.random.default_rng([seed, 500, epoch]).permutation(n_pool)
        out.append(int(perm[offset]))
    return out


def run_round(
    state: LoopState,
    config: LoopConfig,
    dataset: Dataset,
    ontology: FindingOntology,
    session_client=None,
) -> tuple[LoopState, RoundMetrics, list[FeedbackRecord], WeightedKernelRidge]:
    """Execute one loop round; returns the new state, its metrics, the fresh
    feedback records, and the (frozen) surrogate fitted this round."""
    config.validate()
    round_index = state.round_index + 1
    pool = dataset.by_split("finetune")
    by_id = dataset.by_id()
    params = state.params.copy()

    # 1-2: sample a batch and generate guidance at the exploration temperature
    idxs = _batch_indices(len(pool), config.batch_per_round, round_index, config.seed)
    rng = np.random.default_rng([config.seed, 600, round_index])
    batch = [
        (pool[i], Guidance.generate(params, pool[i].x, ontology, config.temperature, rng))
        for i in idxs
    ]

    # 3: score the batch
    if config.judge == "human":
        if session_client is None:
            raise ConfigError("human judge requires a session client")
        judgments = collect_human_scores(batch, session_client, round_index=round_index)
        scores = [j.q for j in judgments]
        source = SOURCE_HUMAN
    else:
        oracle = OracleJudge(kind=config.judge, ontology=ontology)
        judgments = [oracle(scan, g) for scan, g in batch]
        scores = [j.q for j in judgments]
        source = judgments[0].source

    # 4: fresh records enter with weight 1
    fresh = [
        FeedbackRecord(
            scan_id=scan.id,
            tokens=g.tokens,
            text=g.text,
            z=g.z,
            q=q,
            source=source,
            round_created=round_index,
            weight=1.0,
        )
        for (scan, g), q in zip(batch, scores)
    ]

    # 5: stale handling for previously accumulated feedback
    if not config.accumulate:
        feedback = list(fresh)
    elif config.stale_policy == "discard":
        feedback = list(fresh)
    else:
        stale = [r for r in state.feedback]
        if config.stale_policy == "reweight":
            current_text: dict[str, str] = {}
            for rec in stale:
                scan = by_id[rec.scan_id]
                rec.z = encode(params, scan.x)
                if scan.id not in current_text:
                    current_text[scan.id] = render(
                        decode_argmax(params, rec.z), ontology
                    )
                rec.weight = bleu4(rec.text, current_text[scan.id])
        feedback = stale + fresh

    # 6: fit the surrogate anew on all accumulated feedback
    Z = np.stack([r.z for r in feedback])
    q = np.array([r.q for r in feedback])
    w = np.array([r.weight for r in feedback])
    surrogate = WeightedKernelRidge(sigma=config.sigma, ridge=config.ridge).fit(
        Z, q, sample_weight=w
    )

    # 7: fine-tune on the augmented loss; surrogate frozen, penalty embeddings
    # recomputed from x every epoch so the gradient path stays open
    X_train, T_train = split_arrays(dataset, "train", ontology)
    X_feedback = np.stack([by_id[r.scan_id].x for r in feedback])
    for _ in range(config.epochs_per_round):
        _, grads = augmented_loss(
            params, X_train, T_train, X_feedback, surrogate, config.guide_weight
        )
        params.axpy(-config.learning_rate, grads)
    params.round = round_index

    # 8: metrics
    metrics = compute_round_metrics(
        round_index, params, surrogate, feedback, dataset, config, ontology
    )
    new_state = LoopState(params=params, feedback=feedback, round_index=round_index)
    return new_state, metrics, fresh, surrogate


def compute_round_metrics(
    round_index: int,
    params: CaptionerParams,
    surrogate: WeightedKernelRidge | None,
    feedback: list[FeedbackRecord],
    dataset: Dataset,
    config: LoopConfig,
    ontology: FindingOntology,
) -> RoundMetrics:
    X_val, T_val = split_arrays(dataset, "validation", ontology)
    nll_val, _ = nll_loss_batch(params, X_val, T_val)
    judge_kind = config.judge if config.judge != "human" else "fidelity"
    judge = OracleJudge(kind=judge_kind, ontology=ontology)
    held = evaluate(params, surrogate, dataset, "test", judge, ontology)
    if surrogate is None:
        rmse_val = 0.0
        mean_sur = 0.0
    else:
        val = evaluate(params, surrogate, dataset, "validation", judge, ontology)
        rmse_val = val["surrogate_rmse"]
        Z_f = encode_batch(params, np.stack([dataset.by_id()[r.scan_id].x for r in feedback]))
        mean_sur = float(np.mean(surrogate.predict(Z_f)))
    return RoundMetrics(
        round=round_index,
        nll_validation=nll_val,
        surrogate_rmse_validation=rmse_val,
        mean_judge_score_heldout=held["mean_judge_score"],
        decision_accuracy_heldout=held["decision_accuracy"],
        mean_surrogate_score_finetune=mean_sur,
    )


class RunDirError(RuntimeError):
    """Raised for lock conflicts and config mismatches in a run directory."""


class run_lock:
    """Exclusive lock on a run directory; refuses concurrent runs."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirError(
                f"run directory is locked ({self.path}); "
                "remove the lock file if no other run is active"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _append_annotation_lines(run_dir: Path, lines: list[dict]) -> None:
    with (run_dir / "annotations.jsonl").open("a") as f:
        for line in lines:
            f.write(json.dumps(line) + "\n")
        f.flush()
        os.fsync(f.fileno())


def _load_run_feedback(
    run_dir: Path, params: CaptionerParams, dataset: Dataset, upto_round: int
) -> list[FeedbackRecord]:
    path = run_dir / "annotations.jsonl"
    if not path.exists():
        return []
    by_id = dataset.by_id()
    records = []
    with path.open() as f:
        for line in f:
            raw = json.loads(line)
            if raw.get("kind") != "feedback" or raw["round"] > upto_round:
                continue
            records.append(FeedbackRecord.from_line(raw, params, by_id[raw["scan_id"]]))
    return records


def run_loop(
    dataset: Dataset,
    config: LoopConfig,
    run_dir: str | Path,
    ontology: FindingOntology | None = None,
    session_client=None,
    pretrained: CaptionerParams | None = None,
) -> Path:
    """Execute (or resume) a full run; persists checkpoints, metrics.csv, and
    annotations.jsonl under run_dir."""
    config.validate()
    ontology = ontology or FindingOntology.default()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    config_path = run_dir / "config.json"
    metrics_path = run_dir / "metrics.csv"

    with run_lock(run_dir):
        if config_path.exists():
            frozen = LoopConfig.from_dict(json.loads(config_path.read_text()))
            if frozen.hash() != config.hash():
                raise RunDirError("config does not match the frozen config of this run")
        else:
            config_path.write_text(json.dumps(config.to_dict(), indent=2))

        completed = -1
        if metrics_path.exists():
            rows = metrics_path.read_text().strip().splitlines()[1:]
            for row in rows:
                r = int(row.split(",", 1)[0])
                if (ckpt_dir / f"round_{r}.json").exists():
                    completed = max(completed, r)
        else:
            metrics_path.write_text(",".join(METRICS_HEADER) + "\n")

        if completed < 0:
            params = pretrained.copy() if pretrained else pretrain(dataset, ontology, config)
            params.round = 0
            save_checkpoint(params, ckpt_dir / "round_0.json")
            m0 = compute_round_metrics(0, params, None, [], dataset, config, ontology)
            with metrics_path.open("a") as f:
                f.write(m0.to_row() + "\n")
            state = LoopState(params=params, feedback=[], round_index=0)
        else:
            params = load_checkpoint(
                ckpt_dir / f"round_{completed}.json", expected_slots=ontology.size
            )
            feedback = _load_run_feedback(run_dir, params, dataset, completed)
            state = LoopState(params=params, feedback=feedback, round_index=completed)

        while state.round_index < config.rounds:
            state, metrics, fresh, _ = run_round(
                state, config, dataset, ontology, session_client=session_client
            )
            _append_annotation_lines(run_dir, [r.to_line() for r in fresh])
            save_checkpoint(state.params, ckpt_dir / f"round_{state.round_index}.json")
            with metrics_path.open("a") as f:
                f.write(metrics.to_row() + "\n")
    return run_dir


@dataclass
class BootstrapResult:
    sigma: float
    ridge: float
    train_sizes: list[int]
    train_rmse: list[float]
    validation_rmse: list[float]
    test_rmse: float
    test_score_std: float

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def run_bootstrap(
    dataset: Dataset,
    config: LoopConfig,
    ontology: FindingOntology | None = None,
    pretrained: CaptionerParams | None = None,
    run_dir: str | Path | None = None,
    curve_steps: int = 10,
) -> BootstrapResult:
    """Surrogate-only experiment: embed reference reports with the pretrained
    captioner, score them with the information-score rule, weight by BLEU-4
    between generated and reference text, and fit the weighted regression.

    The learning curve over growing training subsets stands in for per-
    iteration loss curves (the closed-form fit has no iterations).
    """
    ontology = ontology or FindingOntology.default()
    params = pretrained.copy() if pretrained else pretrain(dataset, ontology, config)

    def embed_and_score(split):
        scans = dataset.by_split(split)
        Z = np.stack([encode(params, s.x) for s in scans])
        q = np.array([info_score(label_text(s.report, ontology).states) for s in scans])
        w = np.array(
            [
                bleu4(render(decode_argmax(params, z), ontology), s.report)
                for s, z in zip(scans, Z)
            ]
        )
        return Z, q, w

    Z_tr, q_tr, w_tr = embed_and_score("train")
    if not w_tr.any():
        # no generated text overlaps any reference; fall back to uniform weights
        w_tr = np.ones_like(w_tr)
    Z_val, q_val, _ = embed_and_score("validation")
    Z_te, q_te, _ = embed_and_score("test")

    sizes = np.unique(
        np.linspace(max(5, len(q_tr) // curve_steps), len(q_tr), curve_steps).astype(int)
    )
    train_rmse, val_rmse = [], []
    final = None
    for n in sizes:
        model = WeightedKernelRidge(sigma=config.sigma, ridge=config.ridge).fit(
            Z_tr[:n], q_tr[:n], sample_weight=w_tr[:n]
        )
        train_rmse.append(rmse(model, Z_tr[:n], q_tr[:n]))
        val_rmse.append(rmse(model, Z_val, q_val))
        final = model

    test_rmse = rmse(final, Z_te, q_te)
    result = BootstrapResult(
        sigma=config.sigma,
        ridge=config.ridge,
        train_sizes=[int(n) for n in sizes],
        train_rmse=train_rmse,
        validation_rmse=val_rmse,
        test_rmse=test_rmse,
        test_score_std=float(np.std(q_te)),
    )
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "bootstrap_metrics.json").write_text(
            json.dumps(result.to_dict(), indent=2)
        )
        with (run_dir / "bootstrap_curve.csv").open("w") as f:
            f.write("train_size,train_rmse,validation_rmse\n")
            for n, tr, va in zip(result.train_sizes, train_rmse, val_rmse):
                f.write(f"{n},{tr!r},{va!r}\n")
    return result
