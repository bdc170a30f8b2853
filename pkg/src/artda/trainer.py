"""SGD training loop for the DA and DG objectives, evaluation and lambda sweeps."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import OP_SETS, AugmentPolicy, augment_images, resolve_op_set, weak_augment
from .data import ImageBatch, Task, batcher, paired_batches
from .losses import LossWeights, cross_entropy, entropy_min, kl_consistency, total_loss
from .model import Classifier, init_classifier, predict_logprobs
from .seeding import derive_rng
from .stn import LocalizationNet, adversarial_transform, init_localization

log = logging.getLogger(__name__)

STRATEGY_ALIASES = {"none": "", "adv-stn-color": "rnd-color+adv-stn"}
LOSS_KEYS = ("l_m", "l_c", "l_e", "l_adv", "total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Strategy:
    name: str
    ops: tuple[str, ...] = ()
    adversarial: bool = False

    @property
    def random(self) -> bool:
        return bool(self.ops)

    @property
    def active(self) -> bool:
        return self.random or self.adversarial


def parse_strategy(name: str) -> Strategy:
    """``none``, ``rnd-all``, ``rnd-color``, ``rnd-geo``, ``adv-stn``, ``adv-stn-color``
    or a ``+``-joined combination such as ``rnd-color+rnd-geo``."""
    expanded = STRATEGY_ALIASES.get(name, name)
    ops: list[str] = []
    adversarial = False
    for token in filter(None, expanded.split("+")):
        if token == "adv-stn":
            adversarial = True
        elif token in OP_SETS:
            ops.extend(op for op in OP_SETS[token] if op not in ops)
        else:
            raise ValueError(f"unknown strategy component {token!r} in {name!r}; "
                             f"use none, {', '.join(OP_SETS)}, adv-stn or adv-stn-color")
    return Strategy(name, tuple(ops), adversarial)


@dataclass
class TrainConfig:
    mode: str = "DA"
    strategy: str = "rnd-all"
    epochs: int = 60
    lr: float = 0.001
    lr_decay_at: float = 0.8
    lr_final: float = 0.0001
    batch_size: int = 32
    n_aug: int = 2
    m_aug: float = 9.0
    lambda_c: float = 1.0
    lambda_e: float = 0.1
    lambda_t: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2)
    weak_augment: bool = True
    dtype: str = "float32"

    def validate(self) -> None:
        if self.mode not in ("DA", "DG"):
            raise ValueError(f"mode must be DA or DG, got {self.mode!r}")
        parse_strategy(self.strategy)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.lr_decay_at <= 1:
            raise ValueError(f"lr_decay_at must lie in [0, 1], got {self.lr_decay_at}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        AugmentPolicy(self.n_aug, self.m_aug)
        self.weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_e, self.lambda_t)

    @property
    def decay_epoch(self) -> int:
        return int(round(self.lr_decay_at * self.epochs))

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.decay_epoch else self.lr_final


@dataclass
class SeedResult:
    seed: int
    epochs: list[dict] = field(default_factory=list)
    source_acc: float = 0.0
    target_acc: float = 0.0


@dataclass
class RunReport:
    mode: str
    strategy: str
    source_domains: tuple[str, ...]
    target_domain: str
    seeds: list[SeedResult]
    models: list = field(default_factory=list, repr=False)

    @property
    def mean_source_acc(self) -> float:
        return float(np.mean([s.source_acc for s in self.seeds]))

    @property
    def mean_target_acc(self) -> float:
        return float(np.mean([s.target_acc for s in self.seeds]))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "strategy": self.strategy,
            "source_domains": list(self.source_domains),
            "target_domain": self.target_domain,
            "seeds": [asdict(s) for s in self.seeds],
            "mean": {"source_acc": self.mean_source_acc, "target_acc": self.mean_target_acc},
        }


def evaluate(clf: Classifier, dataset: ImageBatch, batch_size: int = 256) -> float:
    """Argmax accuracy in percent; no augmentation."""
    if dataset.labels is None:
        raise ValueError("evaluate needs a labeled dataset")
    if len(dataset) == 0:
        return 0.0
    correct = 0
    dtype = clf.parameters()[0].dtype
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size].astype(dtype, copy=False)
        logits = clf.logits(T.Tensor(x)).data
        correct += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[start:start + batch_size]))
    return 100.0 * correct / len(dataset)


def _batch_stats(images: np.ndarray) -> str:
    return (f"batch of {len(images)}: mean={images.mean():.4g} std={images.std():.4g} "
            f"min={images.min():.4g} max={images.max():.4g}")


def sgd_step(params: Sequence[T.Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data = p.data - p.data.dtype.type(lr) * p.grad


class StepRunner:
    """Builds and differentiates one training step's objective."""

    def __init__(self, config: TrainConfig, clf: Classifier, locnet: LocalizationNet | None,
                 seed: int):
        self.config = config
        self.strategy = parse_strategy(config.strategy)
        self.clf = clf
        self.locnet = locnet
        self.seed = seed
        self.policy = AugmentPolicy(config.n_aug, config.m_aug)
        self.ops = resolve_op_set(self.strategy.ops) if self.strategy.random else ()
        self.dtype = np.dtype(config.dtype)

    def parameters(self) -> list[T.Tensor]:
        params = self.clf.parameters()
        if self.locnet is not None:
            params = params + self.locnet.parameters()
        return params

    def losses(self, source: ImageBatch, target: ImageBatch | None, epoch: int, step: int):
        cfg, strat = self.config, self.strategy
        cast = lambda a: np.ascontiguousarray(a, dtype=self.dtype)  # noqa: E731
        weak_rng = derive_rng(self.seed, "weak_augment", epoch, step)
        xs = source.images
        xs_weak = weak_augment(xs, weak_rng) if cfg.weak_augment else xs
        views = [cast(xs_weak)]
        n_s = len(xs)

        if not strat.active:
            logp = predict_logprobs(T.Tensor(views[0]), self.clf)
            parts = {"l_m": cross_entropy(logp, source.labels, source.domain_tags)}
            return parts, total_loss(cfg.mode, parts, cfg.weights)

        unsup = ImageBatch.concat([source.unlabeled(), target]) if cfg.mode == "DA" else source.unlabeled()
        x_all = unsup.images
        n_u = len(x_all)
        views.append(cast(x_all))
        if strat.random:
            aug_rng = derive_rng(self.seed, "augment", epoch, step)
            x_rand = augment_images(x_all, self.policy, self.ops, aug_rng)
            views.append(cast(x_rand))
        inputs: list = [T.Tensor(np.concatenate(views))]
        if strat.adversarial:
            if strat.random:
                stn_in = x_rand
            else:
                stn_in = weak_augment(x_all, derive_rng(self.seed, "weak_augment", epoch, step, 1))
            inputs.append(adversarial_transform(T.Tensor(cast(stn_in)), self.locnet))
        x = inputs[0] if len(inputs) == 1 else T.concat(inputs, axis=0)
        logp = predict_logprobs(x, self.clf)

        clean = logp[n_s:n_s + n_u]
        p_hat = T.stop_gradient(clean)
        parts = {"l_m": cross_entropy(logp[:n_s], source.labels, source.domain_tags)}
        offset = n_s + n_u
        if strat.random:
            parts["l_c"] = kl_consistency(p_hat, logp[offset:offset + n_u])
            offset += n_u
        if strat.adversarial:
            parts["l_adv"] = kl_consistency(p_hat, logp[offset:offset + n_u])
        if cfg.mode == "DA":
            tgt = unsup.domain_tags == -1
            parts["l_e"] = entropy_min(clean[np.flatnonzero(tgt)])
        return parts, total_loss(cfg.mode, parts, cfg.weights, unsup.domain_tags)

    def step(self, source: ImageBatch, target: ImageBatch | None, lr: float, epoch: int,
             step: int) -> dict:
        params = self.parameters()
        T.zero_grads(params)
        parts, total = self.losses(source, target, epoch, step)
        if not np.isfinite(total.item()):
            values = {k: float(v.item()) for k, v in parts.items()}
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch} step {step}: {values}; source "
                + _batch_stats(source.images)
                + ("" if target is None else "; target " + _batch_stats(target.images)))
        total.backward()
        sgd_step(params, lr)
        out = {k: 0.0 for k in LOSS_KEYS}
        out.update({k: float(v.item()) for k, v in parts.items()})
        out["total"] = float(total.item())
        return out


EpochCallback = Callable[[int, dict], None]


def train_seed(config: TrainConfig, task: Task, seed: int,
               on_epoch: EpochCallback | None = None) -> tuple[SeedResult, Classifier, LocalizationNet | None]:
    config.validate()
    strategy = parse_strategy(config.strategy)
    if config.mode == "DG" and task.source_train.has_target:
        raise ValueError("DG training data contains target-domain samples")
    with T.default_dtype(config.dtype):
        clf = init_classifier(derive_rng(seed, "init_classifier"), task.num_classes, task.input_shape)
        locnet = init_localization(derive_rng(seed, "init_stn"), task.input_shape) if strategy.adversarial else None
    runner = StepRunner(config, clf, locnet, seed)
    result = SeedResult(seed)
    target_pool = task.target.unlabeled()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        sums = {k: 0.0 for k in LOSS_KEYS}
        steps = 0
        if config.mode == "DA" and strategy.active:
            stream = paired_batches(task.source_train, target_pool, config.batch_size, seed, epoch)
        else:
            stream = ((b, None) for b in batcher(task.source_train, config.batch_size, seed, epoch))
        for step, (src, tgt) in enumerate(stream):
            losses = runner.step(src, tgt, lr, epoch, step)
            for k in LOSS_KEYS:
                sums[k] += losses[k]
            steps += 1
        row = {"epoch": epoch, "lr": lr}
        row.update({k: sums[k] / steps for k in LOSS_KEYS})
        row["source_acc"] = evaluate(clf, task.source_test)
        row["target_acc"] = evaluate(clf, task.target)
        result.epochs.append(row)
        log.info("seed %d epoch %d: %s", seed, epoch, row)
        if on_epoch is not None:
            on_epoch(seed, row)
    result.source_acc = result.epochs[-1]["source_acc"]
    result.target_acc = result.epochs[-1]["target_acc"]
    return result, clf, locnet


def train(config: TrainConfig, task: Task, on_epoch: EpochCallback | None = None) -> RunReport:
    """Train once per seed; the report carries per-seed results and their mean."""
    config.validate()
    report = RunReport(config.mode, config.strategy, task.source_names, task.target_name, [])
    for seed in config.seeds:
        result, clf, locnet = train_seed(config, task, seed, on_epoch)
        report.seeds.append(result)
        report.models.append((clf, locnet))
    return report


def log_grid(lo: float = 1e-2, hi: float = 10.0, n: int = 10) -> list[float]:
    """``n`` logarithmically spaced values between ``lo`` and ``hi``."""
    return [float(v) for v in np.logspace(np.log10(lo), np.log10(hi), n)]


@dataclass
class SweepResult:
    lambda_c: list[float]
    lambda_t: list[float]
    accuracy: np.ndarray  # (len(lambda_c), len(lambda_t)) mean target accuracy
    per_seed: dict = field(default_factory=dict)


def sweep(config: TrainConfig, task: Task, lambda_c: Sequence[float],
          lambda_t: Sequence[float]) -> SweepResult:
    """Train and evaluate every (lambda_c, lambda_t) cell for every seed."""
    if not lambda_c or not lambda_t:
        raise ValueError("sweep grid is empty")
    acc = np.zeros((len(lambda_c), len(lambda_t)))
    per_seed = {}
    for i, lc in enumerate(lambda_c):
        for j, lt in enumerate(lambda_t):
            cell = TrainConfig(**{**{f.name: getattr(config, f.name) for f in fields(config)},
                                  "lambda_c": float(lc), "lambda_t": float(lt)})
            report = train(cell, task)
            acc[i, j] = report.mean_target_acc
            per_seed[(float(lc), float(lt))] = [s.target_acc for s in report.seeds]
    return SweepResult([float(v) for v in lambda_c], [float(v) for v in lambda_t], acc, per_seed)


def write_sweep_csv(result: SweepResult, path) -> None:
    """Matrix CSV: header row of lambda_t values, one row per lambda_c."""
    lines = ["lambda_c\\lambda_t," + ",".join(repr(v) for v in result.lambda_t)]
    for lc, row in zip(result.lambda_c, result.accuracy):
        lines.append(repr(lc) + "," + ",".join(repr(float(a)) for a in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
