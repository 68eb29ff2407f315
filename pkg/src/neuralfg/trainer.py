"""Adam training with early stopping, random hyperparameter search, k-fold CV."""
from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape
from .data import SurvivalDataset, split_folds, standardize
from .metrics import EvalHorizons, MetricReport, evaluate_model, event_quantiles
from .model import NfgModel
from .objectives import SurvivalBatch, evaluate_nll, objective_for

log = logging.getLogger(__name__)

GRID = {
    "learning_rate": (1e-3, 1e-4),
    "batch_size": (100, 250),
    "dropout": (0.0, 0.25, 0.5, 0.75),
    "layers": (1, 2, 3, 4),
    "nodes": (25, 50),
}
LARGE_DATA_BATCH_SIZES = (1000, 5000)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, param_norm: float):
        self.epoch, self.batch, self.param_norm = epoch, batch, param_norm
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} "
                         f"(parameter norm {param_norm:.6g})")


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-3
    batch_size: int = 250
    dropout: float = 0.0
    layers: int = 2
    nodes: int = 50

    def check(self, grid: dict = GRID) -> None:
        for name, allowed in grid.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name}={getattr(self, name)} is not on the grid {allowed}")


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    patience: int = 50
    val_fraction: float = 0.10
    seed: int = 0
    variant: str = "nfg"
    n_risks: int | None = None

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.patience < 0 or self.max_epochs < 1:
            raise ValueError("need patience >= 0 and max_epochs >= 1")


class AdamState:
    """Bias-corrected Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        if len(params) != len(self.m):
            raise ValueError("parameter list does not match the optimizer state")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: AdamState, params, grads, lr: float) -> None:
    state.step(params, grads, lr)


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_nll: float = float("inf")
    stopped_epoch: int = 0

    def to_lines(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.epochs)


def stratified_holdout(events: np.ndarray, fraction: float, rng: np.random.Generator):
    """Split indices into (train, held-out) keeping each event label's share."""
    held = []
    for label in np.unique(events):
        idx = np.flatnonzero(events == label)
        idx = idx[rng.permutation(idx.size)]
        held.append(idx[:int(round(fraction * idx.size))])
    held = np.sort(np.concatenate(held))
    if held.size == 0 or held.size == events.size:
        perm = rng.permutation(events.size)
        k = min(max(1, int(round(fraction * events.size))), events.size - 1)
        held = np.sort(perm[:k])
    train = np.setdiff1d(np.arange(events.size), held)
    return train, held


def _param_norm(params) -> float:
    return float(np.sqrt(sum(float(np.sum(p * p)) for p in params)))


def build_model(dataset: SurvivalDataset, hp: HyperParams, cfg: TrainConfig,
                rng: np.random.Generator) -> NfgModel:
    mean, std = standardize(dataset.covariates)
    n_risks = cfg.n_risks or dataset.n_risks
    return NfgModel.build(dataset.n_features, n_risks, layers=hp.layers, nodes=hp.nodes,
                          dropout=hp.dropout, variant=cfg.variant,
                          t_scale=dataset.max_event_time(), mean=mean, std=std, rng=rng)


def train(dataset: SurvivalDataset, hp: HyperParams, cfg: TrainConfig,
          model: NfgModel | None = None) -> tuple[NfgModel, TrainingLog]:
    """Fit with Adam; stop after ``patience`` epochs without validation improvement.

    Returns the parameters of the epoch with the best validation NLL.
    """
    if len(dataset) < 2:
        raise ValueError("training needs at least two patients")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = stratified_holdout(dataset.events, cfg.val_fraction, rng)
    train_set = dataset.subset(train_idx)
    val_batch = SurvivalBatch.from_dataset(dataset, val_idx)
    if model is None:
        model = build_model(train_set, hp, cfg, rng)
    elif model.n_features != dataset.n_features:
        raise ValueError(f"model has {model.n_features} features, data {dataset.n_features}")
    objective = objective_for(model)
    params = model.parameters()
    adam = AdamState(params)
    tape = Tape()
    history = TrainingLog()
    best = [p.copy() for p in params]
    wait = 0

    n = len(train_set)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total, floored = 0.0, 0
        for b, start in enumerate(range(0, n, hp.batch_size)):
            idx = order[start:start + hp.batch_size]
            tape.reset()
            loss = objective(tape, model, SurvivalBatch.from_dataset(train_set, idx),
                             training=True, rng=rng)
            if not np.isfinite(loss.total_nll):
                raise TrainingDivergedError(epoch, b, _param_norm(params))
            grads = tape.backward(loss.total)
            scale = 1.0 / idx.size
            adam.step(params, [grads.wrt(p) * scale for p in params], hp.learning_rate)
            total += loss.total_nll
            floored += loss.floored
        val = evaluate_nll(model, val_batch)
        val_nll = val.total_nll / len(val_batch)
        if not np.isfinite(val_nll):
            raise TrainingDivergedError(epoch, -1, _param_norm(params))
        history.epochs.append({"epoch": epoch, "train_nll": total / n, "val_nll": val_nll,
                               "floored": floored + val.floored})
        if val_nll < history.best_val_nll:
            history.best_val_nll, history.best_epoch = val_nll, epoch
            best = [p.copy() for p in params]
            wait = 0
        else:
            wait += 1
            if wait > cfg.patience:
                break
    history.stopped_epoch = epoch
    for p, b in zip(params, best):
        p[...] = b
    return model, history


# -- hyperparameter search --------------------------------------------------

def sample_hyperparams(rng: np.random.Generator, grid: dict = GRID) -> HyperParams:
    return HyperParams(**{name: type(vals[0])(vals[rng.integers(len(vals))])
                          for name, vals in grid.items()})


@dataclass
class SearchResult:
    best: HyperParams
    best_trial: int
    trials: list


def random_search(dataset: SurvivalDataset, n_trials: int, cfg: TrainConfig,
                  rng: np.random.Generator, grid: dict = GRID,
                  tuning_fraction: float = 0.10) -> SearchResult:
    """Uniform sampling with replacement; best = lowest tuning-set NLL, earliest on ties."""
    if n_trials < 1 or any(len(v) == 0 for v in grid.values()):
        raise ValueError("need at least one trial and a nonempty grid")
    fit_idx, tune_idx = stratified_holdout(dataset.events, tuning_fraction, rng)
    fit_set = dataset.subset(fit_idx)
    tune_batch = SurvivalBatch.from_dataset(dataset, tune_idx)
    trials, best_i, best_nll = [], 0, float("inf")
    for i in range(n_trials):
        hp = sample_hyperparams(rng, grid)
        # every trial shares the training seed, so a setting fully determines its trial
        try:
            model, hist = train(fit_set, hp, cfg)
            nll = evaluate_nll(model, tune_batch).total_nll / len(tune_batch)
        except TrainingDivergedError as exc:
            log.warning("trial %d diverged: %s", i, exc)
            hist, nll = TrainingLog(), float("inf")
        trials.append({"trial": i, "hyperparams": asdict(hp), "tuning_nll": nll,
                       "best_epoch": hist.best_epoch, "stopped_epoch": hist.stopped_epoch})
        if nll < best_nll:
            best_i, best_nll = i, nll
    return SearchResult(HyperParams(**trials[best_i]["hyperparams"]), best_i, trials)


# -- cross-validation ------------------------------------------------------

@dataclass
class CvConfig:
    k: int = 5
    n_trials: int = 100
    hyperparams: HyperParams | None = None  # fixed setting; skips the search
    grid: dict = field(default_factory=lambda: dict(GRID))
    cumulative: bool = True


@dataclass
class CvResult:
    models: list
    report: MetricReport
    fold_info: list


def _run_fold(args):
    dataset, folds, fold, cfg, cv, horizons = args
    train_set = dataset.subset(np.flatnonzero(folds != fold))
    test_set = dataset.subset(np.flatnonzero(folds == fold))
    fold_rng = np.random.default_rng([cfg.seed, fold])
    info = {"fold": fold, "n_train": len(train_set), "n_test": len(test_set), "warnings": []}
    if cv.hyperparams is not None:
        hp = cv.hyperparams
    else:
        search = random_search(train_set, cv.n_trials, cfg, fold_rng, cv.grid)
        hp = search.best
        info["search"] = search.trials
    info["hyperparams"] = asdict(hp)
    fold_cfg = TrainConfig(**{**asdict(cfg), "seed": int(fold_rng.integers(2**63 - 1))})
    model, hist = train(train_set, hp, fold_cfg)
    info["best_epoch"], info["stopped_epoch"] = hist.best_epoch, hist.stopped_epoch
    metrics = evaluate_model(model, test_set, horizons, cumulative=cv.cumulative)
    n_risks = model.n_risks
    for r in range(1, n_risks + 1):
        if not np.any(test_set.events == r):
            msg = f"fold {fold}: no events of risk {r}; its metrics are unavailable"
            log.warning(msg)
            info["warnings"].append(msg)
            for cell in metrics["horizons"][str(r)].values():
                cell.update(dict.fromkeys(cell, None))
            if str(r) in metrics["cumulative"]:
                metrics["cumulative"][str(r)] = {"integrated_brier": None, "c_index_td": None}
    return model, metrics, info


def cross_validate(dataset: SurvivalDataset, cfg: TrainConfig, cv: CvConfig | None = None,
                   horizons: EvalHorizons | None = None, jobs: int = 1) -> CvResult:
    """Stratified k-fold CV: tune on each training split, retrain, score the held-out fold."""
    cv = CvConfig() if cv is None else cv
    if cv.k < 2 or len(dataset) < cv.k:
        raise ValueError(f"need k >= 2 and at least k patients (k={cv.k}, n={len(dataset)})")
    horizons = event_quantiles(dataset.times, dataset.events) if horizons is None else horizons
    folds = split_folds(dataset, cv.k, cfg.seed)
    jobs_args = [(dataset, folds, f, cfg, cv, horizons) for f in range(cv.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, jobs_args))
    else:
        results = [_run_fold(a) for a in jobs_args]
    models = [r[0] for r in results]
    report = MetricReport(horizons, [r[1] for r in results],
                          {"k": cv.k, "seed": cfg.seed, "variant": cfg.variant})
    return CvResult(models, report, [r[2] for r in results])


def grid_points(grid: dict = GRID) -> list[HyperParams]:
    names = list(grid)
    return [HyperParams(**dict(zip(names, combo))) for combo in itertools.product(*grid.values())]
