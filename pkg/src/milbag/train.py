"""End-to-end training loop, cross-validation driver, and ablation runner.

One training step is one bag: forward, bag-level cross-entropy (combined
with the pretext loss on real bags when self-supervision is enabled),
backward, Adam update. Correctly predicted real positive bags are harvested
once augmentation is active, and the virtual bags generated at the end of
epoch k join the shuffled training order of epoch k+1.

Ablation wiring (history fields stay None for disabled components):
  A: bag loss only          B: + virtual-bag augmentation
  C: + self-supervision     D: both
"""

from __future__ import annotations

import hashlib
import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as M
from . import pretext as P
from .augment import InstanceStore, augmentation_schedule, generate_virtual_bags, harvest
from .errors import ConfigError, ContractError, MilbagError
from .metrics import EvalReport, evaluate
from .optim import AdamState, adam_step, ensure_grads
from .tensor import zero_grads

ABLATIONS = ("A", "B", "C", "D")
SSL_TASKS = ("relative", "absolute", "none")


@contextmanager
def _single_thread_blas():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; the defaults are the published operating point."""

    epochs: int = 50
    batch_size: int = 1
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 0.025
    gamma: float = 0.2
    aug_start_epoch: int = 26
    mu: float = 0.3
    ssl_task: str = "absolute"
    threshold: float = 0.5
    seed: int = 0
    ablation: str = "D"
    feature_dim: int = 512
    attention_dim: int = 128
    ssl_hidden: int = 128
    patch_hw: int = 60
    max_virtual_per_epoch: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.ssl_task not in SSL_TASKS:
            raise ConfigError(f"ssl_task must be one of {SSL_TASKS}, got {self.ssl_task!r}")
        if self.use_ssl and self.ssl_task == "none":
            raise ConfigError(f"ablation {self.ablation} needs ssl_task 'relative' or 'absolute'")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ConfigError("training processes one bag per step")
        if not 1 <= self.aug_start_epoch:
            raise ConfigError("aug_start_epoch must be >= 1")

    @property
    def use_augmentation(self) -> bool:
        return self.ablation in ("B", "D")

    @property
    def use_ssl(self) -> bool:
        return self.ablation in ("C", "D")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def synthetic_defaults(**overrides) -> TrainConfig:
    """Defaults adjusted for desk-scale synthetic bags.

    With 36-instance bags the published key fraction 0.025 would harvest
    floor(0.025 * 36) = 0 key instances, disabling augmentation entirely,
    so the synthetic preset raises alpha to 0.1 -- still strictly below the
    generator's planted-motif fraction of 0.15.
    """
    return TrainConfig(**{"alpha": 0.1, **overrides})


@dataclass
class EpochStats:
    epoch: int
    mil_loss: float
    ssl_loss: float | None
    n_virtual_used: int | None
    n_virtual_generated: int | None
    n_keys_harvested: int | None
    n_regulars_harvested: int | None

    def to_dict(self) -> dict:
        return asdict(self)


def _derived_seed(*entropy) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def train_fold(train_bags, config: TrainConfig) -> tuple[M.MilModel, list[EpochStats]]:
    """Train one model on one training split."""
    bags = list(train_bags)
    if any(b.is_virtual for b in bags):
        raise ContractError("training input must be real bags; virtual bags are generated internally")
    n_pos = sum(b.label for b in bags)
    n_neg = len(bags) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError(f"training split needs both classes, got {n_pos} positive "
                            f"and {n_neg} negative bags")
    with _single_thread_blas():
        return _train_fold_inner(bags, config, n_pos, n_neg)


def _train_fold_inner(bags, config, n_pos, n_neg):
    dtype = np.dtype(config.dtype)
    model = M.create_mil_model(seed=np.random.SeedSequence((config.seed, 11)),
                               patch_hw=config.patch_hw,
                               feature_dim=config.feature_dim,
                               attention_dim=config.attention_dim,
                               ssl_hidden=config.ssl_hidden,
                               threshold=config.threshold,
                               dtype=dtype)
    heads = config.ssl_task if config.use_ssl else False
    params = [t for _, t in M.model_parameters(model, heads=heads)]
    adam = AdamState.for_params(params, learning_rate=config.learning_rate,
                                beta1=config.beta1, beta2=config.beta2,
                                weight_decay=config.weight_decay)
    k_bar = float(np.mean([b.k for b in bags]))
    store = InstanceStore(k_bar=k_bar, alpha=config.alpha, gamma=config.gamma)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 13)))

    # pretext bookkeeping, built once per fold
    slices_by_bag = {b.id: P.slices_from_bag(b) for b in bags} if config.use_ssl else {}
    pairs_by_bag = ({b.id: [P.build_pairs(s) for s in slices_by_bag[b.id]]
                     for b in bags} if config.use_ssl and config.ssl_task == "relative" else {})

    history: list[EpochStats] = []
    virtual_bags: list = []
    for epoch in range(1, config.epochs + 1):
        store.clear()
        pool = bags + virtual_bags
        order = shuffle_rng.permutation(len(pool))
        mil_losses = []
        ssl_losses = []
        keys_harvested = 0
        regulars_harvested = 0
        for i in order:
            bag = pool[i]
            pixels = np.stack([inst.pixels for inst in bag.instances])
            prob, attention, features = M.forward_patches(pixels, model)
            l_mil = M.mil_loss(prob, [bag.label])
            loss = l_mil
            if config.use_ssl and not bag.is_virtual:
                slices = slices_by_bag[bag.id]
                if slices:
                    if config.ssl_task == "absolute":
                        l_ssl = P.absolute_loss(slices, features, model.absolute_head)
                    else:
                        l_ssl = P.relative_loss(pairs_by_bag[bag.id], features,
                                                model.relative_head)
                    ssl_losses.append(l_ssl.item())
                    loss = P.total_loss(l_mil, l_ssl, config.mu)
            zero_grads(params)
            loss.backward()
            ensure_grads(params)
            adam_step(params, adam)
            mil_losses.append(l_mil.item())
            if (config.use_augmentation and epoch >= config.aug_start_epoch
                    and not bag.is_virtual and bag.label == 1):
                p = prob.item()
                pred = M.BagPrediction(
                    probability=p, label=int(p >= config.threshold),
                    attention=attention.data.reshape(-1),
                    bag_embedding=attention.data.T @ features.data)
                nk, nr = harvest(bag, pred, store, epoch)
                keys_harvested += nk
                regulars_harvested += nr
        generated = None
        if config.use_augmentation:
            generated = 0
            virtual_next = []
            if augmentation_schedule(epoch, config):
                want = n_neg - n_pos
                if config.max_virtual_per_epoch is not None:
                    want = min(want, config.max_virtual_per_epoch)
                if want > 0:
                    vbags = generate_virtual_bags(store, want,
                                                  _derived_seed(config.seed, 17, epoch))
                    virtual_next = [vb.to_bag(f"virtual-{epoch:03d}-{j:03d}")
                                    for j, vb in enumerate(vbags)]
                    generated = len(virtual_next)
            n_used = len(virtual_bags)
            virtual_bags = virtual_next
        else:
            n_used = None
        history.append(EpochStats(
            epoch=epoch,
            mil_loss=float(np.mean(mil_losses)),
            ssl_loss=float(np.mean(ssl_losses)) if ssl_losses else (0.0 if config.use_ssl else None),
            n_virtual_used=n_used,
            n_virtual_generated=generated,
            n_keys_harvested=keys_harvested if config.use_augmentation else None,
            n_regulars_harvested=regulars_harvested if config.use_augmentation else None,
        ))
    return model, history


# -- cross-validation --------------------------------------------------------


_WORKER_BAGS = None


def _pool_init(bags):
    global _WORKER_BAGS
    _WORKER_BAGS = bags


def _cv_job(payload):
    config_dict, repeat, fold, train_ids, test_ids = payload
    config = TrainConfig(**config_dict)
    by_id = {b.id: b for b in _WORKER_BAGS}
    return _run_one_fold(config, repeat, fold,
                         [by_id[i] for i in train_ids], [by_id[i] for i in test_ids])


def _run_one_fold(config, repeat, fold, train_bags, test_bags):
    started = time.perf_counter()
    fold_seed = _derived_seed(config.seed, repeat, fold)
    fold_config = replace(config, seed=fold_seed)
    try:
        model, history = train_fold(train_bags, fold_config)
        with _single_thread_blas():
            report = evaluate(model, test_bags, config.threshold)
    except MilbagError as e:
        raise MilbagError(f"repeat {repeat} fold {fold}: {e}") from e
    return {
        "repeat": repeat,
        "fold": fold,
        "fold_seed": fold_seed,
        "n_train": len(train_bags),
        "n_test": len(test_bags),
        "n_virtual_generated_total": (sum(h.n_virtual_generated or 0 for h in history)
                                      if config.use_augmentation else None),
        "final_mil_loss": history[-1].mil_loss,
        "metrics": report.to_dict(),
    }, time.perf_counter() - started


METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "f1", "auc")


def _aggregate(fold_entries) -> dict:
    """Mean and spread per metric over fold-level values.

    `std` is the population standard deviation over all defined fold values;
    `std_over_repeat_means` first averages within each repeat. Folds where a
    metric is undefined are excluded from that metric's aggregation and
    counted in `n_undefined`.
    """
    out = {}
    for name in METRIC_NAMES:
        values = [(e["repeat"], e["metrics"][name]) for e in fold_entries
                  if e["metrics"][name] is not None]
        if not values:
            out[name] = {"mean": None, "std": None, "std_over_repeat_means": None,
                         "n_defined": 0, "n_undefined": len(fold_entries)}
            continue
        arr = np.array([v for _, v in values], dtype=np.float64)
        repeats = sorted({r for r, _ in values})
        repeat_means = [float(np.mean([v for r, v in values if r == rep])) for rep in repeats]
        out[name] = {
            "mean": float(arr.mean()),
            "std": float(arr.std()),
            "std_over_repeat_means": float(np.std(repeat_means)),
            "n_defined": len(values),
            "n_undefined": len(fold_entries) - len(values),
        }
    return out


def _run_jobs(jobs, job_fn, workers: int, bags):
    if workers <= 1:
        _pool_init(bags)
        return [job_fn(j) for j in jobs]
    import multiprocessing as mp

    ctx = mp.get_context("spawn")
    with ctx.Pool(processes=workers, initializer=_pool_init, initargs=(bags,)) as pool:
        return pool.map(job_fn, jobs, chunksize=1)


def run_cv(bags, config: TrainConfig, n_folds: int = 10, n_repeats: int = 5,
           workers: int = 1) -> tuple[dict, dict]:
    """Train one model per (repeat, fold) and aggregate the evaluations.

    Returns (report, timing). The report is fully deterministic for a given
    dataset, config, fold count and repeat count -- independent of the
    worker count; wall-clock measurements live in the separate timing dict.
    """
    from .folds import stratified_folds

    bags = list(bags)
    plan = stratified_folds(bags, n_folds, n_repeats, config.seed)
    jobs = []
    for repeat in range(n_repeats):
        for fold in range(n_folds):
            jobs.append((config.to_dict(), repeat, fold,
                         sorted(plan.train_ids(repeat, fold)),
                         sorted(plan.test_ids(repeat, fold))))
    started = time.perf_counter()
    results = _run_jobs(jobs, _cv_job, workers, bags)
    wall = time.perf_counter() - started
    entries = sorted((r for r, _ in results), key=lambda e: (e["repeat"], e["fold"]))
    durations = {f"{e['repeat']}/{e['fold']}": d
                 for (e, d) in sorted(results, key=lambda rd: (rd[0]["repeat"], rd[0]["fold"]))}
    report = {
        "schema_version": 1,
        "kind": "cv",
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "n_folds": n_folds,
        "n_repeats": n_repeats,
        "n_bags": len(bags),
        "fold_plan_hash": plan.plan_hash(),
        "fold_plan_warnings": plan.warnings,
        "folds": entries,
        "aggregate": _aggregate(entries),
    }
    timing = {"wall_seconds": wall, "fold_seconds": durations}
    return report, timing


# -- ablation ----------------------------------------------------------------


def split_holdout(bags, seed: int, test_fraction: float = 0.5):
    """Stratified shuffle split; returns (train_bags, test_bags)."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 23)))
    train, test = [], []
    for label in (0, 1):
        group = [b for b in bags if b.label == label]
        order = rng.permutation(len(group))
        n_test = max(1, int(round(len(group) * test_fraction)))
        if n_test >= len(group):
            raise ContractError(f"class {label} too small to split")
        for j, idx in enumerate(order):
            (test if j < n_test else train).append(group[idx])
    return train, test


def _ablate_job(payload):
    config_dict, row, seed, test_fraction = payload
    config = TrainConfig(**config_dict)
    train_bags, test_bags = split_holdout(_WORKER_BAGS, seed, test_fraction)
    model, history = train_fold(train_bags, config)
    with _single_thread_blas():
        report = evaluate(model, test_bags, config.threshold)
    return {"row": row, "seed": seed, "metrics": report.to_dict(),
            "n_train": len(train_bags), "n_test": len(test_bags)}


def ablation_rows(base: TrainConfig, include_pretext: bool = False):
    rows = [("A", replace(base, ablation="A")),
            ("B", replace(base, ablation="B")),
            ("C", replace(base, ablation="C", ssl_task="absolute")),
            ("D", replace(base, ablation="D", ssl_task="absolute"))]
    if include_pretext:
        rows.append(("C_relative", replace(base, ablation="C", ssl_task="relative")))
    return rows


def run_ablation(bags, base: TrainConfig, seeds, include_pretext: bool = False,
                 test_fraction: float = 0.5, workers: int = 1) -> dict:
    """Train every ablation row once per seed on a paired holdout split.

    The split and the model initialization depend only on the seed, so all
    rows see identical data and identical starting weights for a given seed.
    """
    bags = list(bags)
    seeds = list(seeds)
    rows = ablation_rows(base, include_pretext)
    jobs = []
    for row, cfg in rows:
        for seed in seeds:
            jobs.append((replace(cfg, seed=seed).to_dict(), row, seed, test_fraction))
    results = _run_jobs(jobs, _ablate_job, workers, bags)
    by_row = {row: [] for row, _ in rows}
    for res in results:
        by_row[res["row"]].append(res)
    table = {}
    for row, _ in rows:
        entries = sorted(by_row[row], key=lambda e: e["seed"])
        table[row] = {
            "runs": entries,
            "aggregate": _aggregate([{"repeat": e["seed"], "metrics": e["metrics"]}
                                     for e in entries]),
        }
    return {
        "schema_version": 1,
        "kind": "ablation",
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "base_config": base.to_dict(),
        "seeds": seeds,
        "test_fraction": test_fraction,
        "rows": table,
    }


ROW_TITLES = {
    "A": "(A) MIL only",
    "B": "(B) MIL + augmentation",
    "C": "(C) MIL + self-supervision",
    "D": "(D) MIL + both",
    "C_relative": "(C) relative-location pretext",
}


def format_ablation_table(report: dict) -> str:
    lines = [f"{'method':<32}" + "".join(f"{m:>22}" for m in METRIC_NAMES)]
    for row, data in report["rows"].items():
        agg = data["aggregate"]
        cells = []
        for m in METRIC_NAMES:
            a = agg[m]
            cells.append("      undefined       " if a["mean"] is None
                         else f"    {a['mean']:.3f} +/- {a['std']:.3f}")
        lines.append(f"{ROW_TITLES.get(row, row):<32}" + "".join(cells))
    return "\n".join(lines)
